//! Profiles: functions of the log-radial variable `s >= 0`, vanishing at 0,
//! with square-integrable derivative. Stored piecewise linear on an arbitrary
//! increasing knot grid, constant past the last knot, so exact knots (the
//! piecewise-linear ramp, translates, dilates) stay exact.

use crate::error::CcxError;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Profile {
    /// Strictly increasing knot grid, `grid[0] == 0`.
    grid: Vec<f64>,
    /// Values at the knots, `values[0] == 0`.
    values: Vec<f64>,
    /// Slope on each knot interval; `slopes.len() == grid.len() - 1`.
    slopes: Vec<f64>,
}

impl Profile {
    /// Build from knots and values; slopes are derived so the piecewise-linear
    /// interpolant passes through the samples exactly.
    pub fn from_samples(grid: Vec<f64>, values: Vec<f64>) -> Result<Profile> {
        if grid.len() < 2 || grid.len() != values.len() {
            return Err(CcxError::InvalidProfile(format!(
                "need matching grids of length >= 2, got {} and {}",
                grid.len(),
                values.len()
            )));
        }
        if grid[0] != 0.0 {
            return Err(CcxError::InvalidProfile(format!(
                "grid must start at 0, got {}",
                grid[0]
            )));
        }
        if values[0] != 0.0 {
            return Err(CcxError::InvalidProfile(format!(
                "profile value at 0 must vanish, got {}",
                values[0]
            )));
        }
        let mut slopes = Vec::with_capacity(grid.len() - 1);
        for k in 0..grid.len() - 1 {
            let ds = grid[k + 1] - grid[k];
            if !(ds > 0.0) {
                return Err(CcxError::InvalidProfile(format!(
                    "grid not strictly increasing at index {k}"
                )));
            }
            let m = (values[k + 1] - values[k]) / ds;
            if !m.is_finite() {
                return Err(CcxError::InvalidProfile("non-finite slope".into()));
            }
            slopes.push(m);
        }
        let p = Profile {
            grid,
            values,
            slopes,
        };
        if !p.energy().is_finite() {
            return Err(CcxError::InvalidProfile("divergent derivative energy".into()));
        }
        Ok(p)
    }

    /// Build from derivative samples: slope on each interval of `grid`.
    /// Values are exact integrals of the slopes, so `psi(0) = 0` exactly.
    pub fn from_slopes(grid: Vec<f64>, slopes: Vec<f64>) -> Result<Profile> {
        if grid.len() < 2 || slopes.len() != grid.len() - 1 {
            return Err(CcxError::InvalidProfile(
                "slope count must be one less than grid length".into(),
            ));
        }
        let mut values = Vec::with_capacity(grid.len());
        values.push(0.0);
        for k in 0..slopes.len() {
            let v = values[k] + slopes[k] * (grid[k + 1] - grid[k]);
            values.push(v);
        }
        Profile::from_samples(grid, values)
    }

    pub fn zero() -> Profile {
        Profile {
            grid: vec![0.0, 1.0],
            values: vec![0.0, 0.0],
            slopes: vec![0.0],
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn s_max(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Constant value for `s > s_max`.
    pub fn tail_value(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= self.s_max() {
            return self.tail_value();
        }
        let k = match self
            .grid
            .binary_search_by(|g| g.partial_cmp(&s).unwrap())
        {
            Ok(i) => return self.values[i],
            Err(i) => i - 1,
        };
        self.values[k] + self.slopes[k] * (s - self.grid[k])
    }

    /// Derivative at `s` (left-continuous on knots; 0 outside `[0, s_max]`).
    pub fn deriv(&self, s: f64) -> f64 {
        if s <= 0.0 || s >= self.s_max() {
            return 0.0;
        }
        let k = match self
            .grid
            .binary_search_by(|g| g.partial_cmp(&s).unwrap())
        {
            Ok(i) => {
                if i == 0 {
                    0
                } else {
                    i - 1
                }
            }
            Err(i) => i - 1,
        };
        self.slopes[k]
    }

    /// Derivative energy `int psi'^2 ds`, exact for the piecewise-linear form.
    pub fn energy(&self) -> f64 {
        let mut e = 0.0;
        for k in 0..self.slopes.len() {
            e += self.slopes[k] * self.slopes[k] * (self.grid[k + 1] - self.grid[k]);
        }
        e
    }

    /// `int (psi_1' - psi_2')^2 ds` over the union grid, exact.
    pub fn deriv_l2_distance(&self, other: &Profile) -> f64 {
        self.deriv_l2_distance_up_to(other, f64::INFINITY)
    }

    /// Same restricted to `[0, hi]`.
    pub fn deriv_l2_distance_up_to(&self, other: &Profile, hi: f64) -> f64 {
        let mut knots: Vec<f64> = self.grid.iter().chain(other.grid.iter()).cloned().collect();
        knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        knots.dedup();
        let top = self.s_max().max(other.s_max()).min(hi);
        let mut acc = 0.0;
        for w in knots.windows(2) {
            let (a, b) = (w[0], w[1].min(top));
            if a >= top {
                break;
            }
            let mid = 0.5 * (a + b);
            let d = self.deriv(mid) - other.deriv(mid);
            acc += d * d * (b - a);
        }
        acc.sqrt()
    }

    /// Weighted mass `int psi^2 e^{-2 c s} ds`, used for membership checks.
    pub fn weighted_l2(&self, c: f64) -> f64 {
        // per-interval 6-point Gauss-Legendre on psi^2 e^{-2cs}
        const X: [f64; 6] = [
            -0.932469514203152,
            -0.661209386466265,
            -0.238619186083197,
            0.238619186083197,
            0.661209386466265,
            0.932469514203152,
        ];
        const W: [f64; 6] = [
            0.171324492379170,
            0.360761573048139,
            0.467913934572691,
            0.467913934572691,
            0.360761573048139,
            0.171324492379170,
        ];
        let mut acc = 0.0;
        for k in 0..self.slopes.len() {
            let (a, b) = (self.grid[k], self.grid[k + 1]);
            // subdivide so the exponential varies by at most ~1/4 nat per panel
            let m_sub = ((2.0 * c.abs() * (b - a) / 0.25).ceil() as usize).clamp(1, 4096);
            for q in 0..m_sub {
                let pa = a + (b - a) * q as f64 / m_sub as f64;
                let pb = a + (b - a) * (q + 1) as f64 / m_sub as f64;
                let h = 0.5 * (pb - pa);
                let mid = 0.5 * (pa + pb);
                let mut cell = 0.0;
                for j in 0..6 {
                    let s = mid + h * X[j];
                    let v = self.values[k] + self.slopes[k] * (s - a);
                    cell += W[j] * v * v * (-2.0 * c * s).exp();
                }
                acc += h * cell;
            }
        }
        // constant tail: int_{smax}^inf tail^2 e^{-2cs} ds
        let t = self.tail_value();
        if c > 0.0 && t != 0.0 {
            acc += t * t * (-2.0 * c * self.s_max()).exp() / (2.0 * c);
        }
        acc
    }

    pub fn negate(&self) -> Profile {
        Profile {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| -v).collect(),
            slopes: self.slopes.iter().map(|m| -m).collect(),
        }
    }

    pub fn scale_values(&self, c: f64) -> Profile {
        Profile {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| c * v).collect(),
            slopes: self.slopes.iter().map(|m| c * m).collect(),
        }
    }

    /// Validate the membership invariants on the sampled range: vanishing at 0,
    /// finite energy and weighted mass, Hoelder-1/2 consistency between knots,
    /// and smallness of `psi(s)/sqrt(s)` at both grid ends.
    pub fn validate(&self, end_ratio_bound: f64) -> Result<()> {
        let e = self.energy();
        if !e.is_finite() {
            return Err(CcxError::InvalidProfile("divergent energy".into()));
        }
        let sqrt_e = e.sqrt();
        for k in 0..self.slopes.len() {
            let ds = self.grid[k + 1] - self.grid[k];
            let dv = (self.values[k + 1] - self.values[k]).abs();
            if dv > ds.sqrt() * sqrt_e + 1e-9 {
                return Err(CcxError::InvalidProfile(format!(
                    "Hoelder-1/2 violation on interval {k}"
                )));
            }
        }
        if self.is_zero() {
            return Ok(());
        }
        let s1 = self.grid[1];
        let r_lo = self.values[1].abs() / s1.sqrt();
        let r_hi = self.tail_value().abs() / self.s_max().sqrt();
        let scale = self.sup_ratio_unchecked().0;
        if r_lo > end_ratio_bound * scale + 1e-12 || r_hi > end_ratio_bound * scale + 1e-12 {
            return Err(CcxError::InvalidProfile(format!(
                "psi(s)/sqrt(s) not small at the grid ends: {r_lo:.3e}, {r_hi:.3e}"
            )));
        }
        Ok(())
    }

    /// `max_{s>0} |psi(s)|/sqrt(s)` with its location. Exact per interval:
    /// on a linear piece `a + m s` the ratio has a single interior critical
    /// point at `s = a / m` when that lands inside the interval.
    pub fn sup_ratio(&self) -> Result<(f64, f64)> {
        if self.is_zero() {
            return Err(CcxError::ZeroProfile);
        }
        Ok(self.sup_ratio_unchecked())
    }

    fn sup_ratio_unchecked(&self) -> (f64, f64) {
        let mut best = (0.0f64, 1.0f64);
        let mut consider = |s: f64, v: f64| {
            if s > 0.0 {
                let r = v.abs() / s.sqrt();
                if r > best.0 {
                    best = (r, s);
                }
            }
        };
        for k in 0..self.slopes.len() {
            let (s0, s1) = (self.grid[k], self.grid[k + 1]);
            let m = self.slopes[k];
            // value(s) = values[k] + m (s - s0) = a + m s with a:
            let a = self.values[k] - m * s0;
            consider(s1, self.values[k + 1]);
            if m != 0.0 {
                // d/ds [(a+ms)^2/s] = (a+ms)(ms-a)/s^2 vanishes at s = a/m
                let s_star = a / m;
                if s_star > s0 && s_star < s1 {
                    consider(s_star, a + m * s_star);
                }
            }
        }
        // constant tail: ratio decreasing in s, so the knot s_max already covers it
        best
    }

    /// Least-squares fit of the one-parameter ramp family
    /// `s0 -> (1/sqrt(s0)) ramp(s/s0)` minimizing the derivative L2 distance.
    /// The optimum satisfies `s0 = argmax psi(s)/sqrt(s)` and the squared
    /// residual is `energy + 1 - 2 max_ratio`.
    pub fn fit_moser(&self) -> Result<(f64, f64)> {
        let (ratio, s0) = self.sup_ratio()?;
        let res2 = (self.energy() + 1.0 - 2.0 * ratio).max(0.0);
        Ok((s0, res2.sqrt()))
    }
}

/// The piecewise-linear ramp profile with exact knots at 0 and 1.
pub fn moser_profile() -> Profile {
    Profile::from_samples(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap()
}

/// `psi_a(s) = psi(s - a)`, zero on `[0, a]`.
pub fn translate_profile(psi: &Profile, a: f64) -> Result<Profile> {
    if a < 0.0 {
        return Err(CcxError::NegativeShift(a));
    }
    if a == 0.0 {
        return Ok(psi.clone());
    }
    let mut grid = Vec::with_capacity(psi.grid.len() + 1);
    let mut values = Vec::with_capacity(psi.values.len() + 1);
    grid.push(0.0);
    values.push(0.0);
    for (s, v) in psi.grid.iter().zip(psi.values.iter()) {
        grid.push(s + a);
        values.push(*v);
    }
    Profile::from_samples(grid, values)
}

/// `psi_lambda(t) = lambda^{-1/2} psi(lambda t)`; exact on the rescaled knots.
pub fn scale_profile(psi: &Profile, lambda: f64) -> Result<Profile> {
    if !(lambda > 0.0) {
        return Err(CcxError::DomainError(format!("lambda = {lambda}")));
    }
    let c = lambda.sqrt().recip();
    let grid: Vec<f64> = psi.grid.iter().map(|s| s / lambda).collect();
    let values: Vec<f64> = psi.values.iter().map(|v| c * v).collect();
    Profile::from_samples(grid, values)
}

/// Smooth compactly-supported approximation of the derivative within `eps`
/// in L2: mollify `psi'` with a C-infinity bump kernel, then subtract a wide
/// low bump past the support carrying `int chi` so the corrected derivative
/// has zero mean and its antiderivative returns to zero. The bump width is
/// `1/lam` with `lam = eps^2 / (4 |chi|_{L1}^2 |theta0|_{L2}^2)`, which caps
/// the correction's L2 norm at `eps/2`; the mollifier width shrinks until the
/// mollification error is well under the remaining budget.
pub fn smooth_profile(psi: &Profile, eps: f64) -> Result<Profile> {
    if !(eps > 0.0) {
        return Err(CcxError::DomainError(format!("eps = {eps}")));
    }
    if psi.is_zero() {
        return Ok(Profile::zero());
    }

    let s_max = psi.s_max();

    // C^infty bump kernel on [-1, 1], normalized numerically
    let kernel = |x: f64| -> f64 {
        if x.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - x * x)).exp()
        }
    };
    let kn = 41;
    let mut knorm = 0.0;
    for j in 0..kn {
        let x = -1.0 + 2.0 * (j as f64 + 0.5) / kn as f64;
        knorm += kernel(x) * (2.0 / kn as f64);
    }

    // mollified part on a fine grid over [0, s_max + 6h]
    let mollify = |h: f64| -> (Vec<f64>, Vec<f64>) {
        let hi = s_max + 6.0 * h;
        let dt = (h / 6.0).min(s_max / 1024.0).max(hi / 60_000.0);
        let n = (hi / dt).ceil() as usize;
        let mut grid = Vec::with_capacity(n + 1);
        for k in 0..=n {
            grid.push(hi * k as f64 / n as f64);
        }
        let mut slopes = Vec::with_capacity(n);
        for k in 0..n {
            let s = 0.5 * (grid[k] + grid[k + 1]);
            let mut acc = 0.0;
            for j in 0..kn {
                let x = -1.0 + 2.0 * (j as f64 + 0.5) / kn as f64;
                acc += psi.deriv(s - h * x) * kernel(x) * (2.0 / kn as f64);
            }
            slopes.push(acc / knorm);
        }
        (grid, slopes)
    };

    let distance_no_bump = |grid: &[f64], slopes: &[f64]| -> f64 {
        let trial = Profile::from_slopes(grid.to_vec(), slopes.to_vec()).unwrap();
        trial.deriv_l2_distance_up_to(psi, f64::INFINITY)
    };

    let mut h = 0.25f64.min(s_max / 4.0).max(1e-4);
    let (mut grid, mut slopes) = mollify(h);
    for _ in 0..12 {
        let d = distance_no_bump(&grid, &slopes);
        if d <= 0.45 * eps && (d <= 5e-4 || h <= 1.1e-3) {
            break;
        }
        h *= 0.5;
        let built = mollify(h);
        grid = built.0;
        slopes = built.1;
    }

    // zero-mean correction bump on its own coarse knots past the support
    let total: f64 = slopes
        .iter()
        .enumerate()
        .map(|(k, m)| m * (grid[k + 1] - grid[k]))
        .sum();
    if total != 0.0 {
        let chi_l1: f64 = slopes
            .iter()
            .enumerate()
            .map(|(k, m)| m.abs() * (grid[k + 1] - grid[k]))
            .sum();
        // |theta0|_{L2}^2 for theta0(x) = 30 x^2 (1-x)^2 on [0,1]
        let theta0_l2_sq = 900.0 / 630.0;
        let lam = eps * eps / (4.0 * chi_l1 * chi_l1 * theta0_l2_sq);
        let width = (1.0 / lam).max(1.0);
        let start = *grid.last().unwrap();
        let nb = 64;
        for j in 0..nb {
            let a = start + width * j as f64 / nb as f64;
            let b = start + width * (j + 1) as f64 / nb as f64;
            let x = ((0.5 * (a + b)) - start) / width;
            let w = 30.0 * (x * (1.0 - x)) * (x * (1.0 - x));
            grid.push(b);
            slopes.push(-total * w / width);
            let _ = a;
        }
    }
    Profile::from_slopes(grid, slopes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moser_values() {
        let l = moser_profile();
        assert_eq!(l.eval(0.5), 0.5);
        assert_eq!(l.eval(3.0), 1.0);
        assert!((l.energy() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn translate_basics() {
        let l = moser_profile();
        let l0 = translate_profile(&l, 0.0).unwrap();
        assert_eq!(l0.eval(0.7), l.eval(0.7));
        let l1 = translate_profile(&l, 1.0).unwrap();
        assert_eq!(l1.eval(2.0), 1.0);
        assert_eq!(l1.eval(0.9), 0.0);
        // energy invariant, sup ratio drops to 1/sqrt(1+a)
        assert!((l1.energy() - 1.0).abs() < 1e-15);
        let (r, s) = l1.sup_ratio().unwrap();
        assert!((r - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((s - 2.0).abs() < 1e-12);
        assert!(translate_profile(&l, -0.1).is_err());
    }

    #[test]
    fn scale_basics() {
        let l = moser_profile();
        let s1 = scale_profile(&l, 1.0).unwrap();
        assert_eq!(s1.eval(0.3), l.eval(0.3));
        let s2 = scale_profile(&l, 2.0).unwrap();
        assert!((s2.energy() - l.energy()).abs() < 1e-10);
        // psi_2(t) = 2^{-1/2} L(2t): knot at 0.5
        assert!((s2.eval(0.5) - 1.0 / 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sup_ratio_moser() {
        let l = moser_profile();
        let (r, s) = l.sup_ratio().unwrap();
        assert!((r - 1.0).abs() < 1e-14);
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sup_ratio_dense_scan_oracle() {
        // ramp psi(s) = sqrt(s) * min(s, 1) sampled, vs brute-force scan
        let n = 2048;
        let smax = 5.0;
        let mut grid = Vec::with_capacity(n + 1);
        let mut vals = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let s = smax * k as f64 / n as f64;
            grid.push(s);
            vals.push(s.sqrt() * s.min(1.0));
        }
        let p = Profile::from_samples(grid, vals).unwrap();
        let (r, _) = p.sup_ratio().unwrap();
        // brute force over the piecewise-linear interpolant
        let mut brute: f64 = 0.0;
        let m = 1_000_000;
        for k in 1..=m {
            let s = smax * k as f64 / m as f64;
            brute = brute.max(p.eval(s).abs() / s.sqrt());
        }
        assert!((r - brute).abs() < 1e-6, "exact {r} vs scan {brute}");
    }

    #[test]
    fn fit_moser_family_members() {
        let l = moser_profile();
        let (s0, res) = l.fit_moser().unwrap();
        assert!((s0 - 1.0).abs() < 1e-12);
        assert!(res <= 1e-8);

        // psi = (1/sqrt(2)) L(s/2) = scale_profile(L, 1/2)
        let p2 = scale_profile(&l, 0.5).unwrap();
        let (s0b, resb) = p2.fit_moser().unwrap();
        assert!((s0b - 2.0).abs() < 1e-12);
        assert!(resb <= 1e-8);

        // translated ramp is far from the family
        let l1 = translate_profile(&l, 1.0).unwrap();
        let (_, resc) = l1.fit_moser().unwrap();
        assert!(resc > 0.1);
    }

    #[test]
    fn smooth_profile_bounds() {
        let l = moser_profile();
        let sm = smooth_profile(&l, 0.1).unwrap();
        let d = sm.deriv_l2_distance(&l);
        assert!(d <= 0.1, "distance {d}");

        // already smooth: near identity. Derivative sin^2(pi s / 2) on [0, 2]
        // is C^1 across its support edges.
        let n = 4096;
        let mut grid = Vec::new();
        let mut slopes = Vec::new();
        for k in 0..=n {
            grid.push(4.0 * k as f64 / n as f64);
        }
        for k in 0..n {
            let s = 4.0 * (k as f64 + 0.5) / n as f64;
            let d = if s < 2.0 {
                let w = (std::f64::consts::FRAC_PI_2 * s).sin();
                w * w
            } else {
                0.0
            };
            slopes.push(d);
        }
        let p = Profile::from_slopes(grid, slopes).unwrap();
        let sp = smooth_profile(&p, 1.0).unwrap();
        // mollification is a near-identity on the support; the zero-mean
        // correction lives past it and is bounded by the eps/2 budget
        assert!(sp.deriv_l2_distance_up_to(&p, p.s_max()) <= 1e-3);
        assert!(sp.deriv_l2_distance(&p) <= 1.0);

        let z = smooth_profile(&Profile::zero(), 0.5).unwrap();
        assert!(z.is_zero());
    }

    #[test]
    fn validation_rejects_bad_profiles() {
        assert!(Profile::from_samples(vec![0.0, 1.0], vec![0.5, 1.0]).is_err());
        // wild oscillation violating Hoelder consistency
        let p = Profile::from_samples(vec![0.0, 1e-8, 1.0], vec![0.0, 1.0, 0.0]).unwrap();
        assert!(p.validate(0.5).is_err());
    }
}
