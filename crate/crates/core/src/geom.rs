use serde::{Deserialize, Serialize};

/// A point of the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn sub(&self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(&self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(&self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(&self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn dot(&self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn angle(&self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// An offset from an anchor point, kept in log-polar form so radii far below
/// the f64 underflow threshold remain meaningful. The point represented is
/// `anchor + e^{log_r} (cos theta, sin theta)`.
#[derive(Debug, Clone, Copy)]
pub struct LogOffset {
    pub log_r: f64,
    pub theta: f64,
}

impl LogOffset {
    pub fn new(log_r: f64, theta: f64) -> Self {
        LogOffset { log_r, theta }
    }

    /// Cartesian offset vector; underflows gracefully to (0, 0) for very deep radii.
    pub fn to_vec(&self) -> Point2 {
        let r = self.log_r.exp();
        Point2::new(r * self.theta.cos(), r * self.theta.sin())
    }
}

/// log |r1 e^{i t1} - r2 e^{i t2}| for offsets given in log form, stable when
/// the two radii differ by hundreds of orders of magnitude.
pub fn log_dist_polar(log_r1: f64, t1: f64, log_r2: f64, t2: f64) -> f64 {
    if log_r1 == f64::NEG_INFINITY {
        return log_r2;
    }
    if log_r2 == f64::NEG_INFINITY {
        return log_r1;
    }
    let (la, ta, lb, tb) = if log_r1 >= log_r2 {
        (log_r1, t1, log_r2, t2)
    } else {
        (log_r2, t2, log_r1, t1)
    };
    let rho = (lb - la).exp(); // <= 1
    let c = (ta - tb).cos();
    // |1 - rho e^{i dt}|^2 = (1 - rho)^2 + 2 rho (1 - cos dt), cancellation-free
    let m2 = (1.0 - rho) * (1.0 - rho) + 2.0 * rho * (1.0 - c);
    if m2 > 0.0 {
        la + 0.5 * m2.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// log |p + r e^{i theta} - q| where `p - q` is a moderate vector and the
/// offset radius may be far below underflow. Exact in the two regimes and
/// accurate to ~1e-15 relative in between.
pub fn log_dist_to(anchor_minus_target: Point2, off: LogOffset) -> f64 {
    let d = anchor_minus_target;
    let dn = d.norm();
    if dn == 0.0 {
        return off.log_r;
    }
    // If the offset is representable and not negligible, do plain arithmetic.
    if off.log_r > dn.ln() - 30.0 {
        let v = off.to_vec();
        let w = d.add(v);
        let n = w.norm();
        if n > 0.0 {
            return n.ln();
        }
        return f64::NEG_INFINITY;
    }
    // Offset negligible relative to |d|.
    dn.ln()
}

pub fn logsumexp_pair(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Online log-sum-exp accumulator with deterministic sequential order.
#[derive(Debug, Clone)]
pub struct LogSum {
    max: f64,
    sum: f64,
}

impl Default for LogSum {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSum {
    pub fn new() -> Self {
        LogSum {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn add(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term > self.max {
            if self.max == f64::NEG_INFINITY {
                self.sum = 1.0;
            } else {
                self.sum = self.sum * (self.max - log_term).exp() + 1.0;
            }
            self.max = log_term;
        } else {
            self.sum += (log_term - self.max).exp();
        }
    }

    pub fn log_total(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }

    pub fn total(&self) -> f64 {
        let l = self.log_total();
        if l == f64::NEG_INFINITY {
            0.0
        } else {
            l.exp()
        }
    }
}

/// Signed accumulator: two log-sum-exp lanes, one per sign.
#[derive(Debug, Clone, Default)]
pub struct SignedLogSum {
    pos: LogSum,
    neg: LogSum,
}

impl SignedLogSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value_log: f64, negative: bool) {
        if negative {
            self.neg.add(value_log);
        } else {
            self.pos.add(value_log);
        }
    }

    pub fn add_value(&mut self, v: f64) {
        if v == 0.0 || !v.is_finite() {
            return;
        }
        self.add(v.abs().ln(), v < 0.0);
    }

    /// Signed total; `Err` when either lane's log-total exceeds the f64 range.
    pub fn total(&self) -> Result<f64, crate::CcxError> {
        let lp = self.pos.log_total();
        let ln = self.neg.log_total();
        if lp > 709.0 || ln > 709.0 {
            // Representable only in log space.
            if lp > ln + 40.0 || ln > lp + 40.0 {
                return Err(crate::CcxError::OverflowDominant);
            }
            return Err(crate::CcxError::OverflowDominant);
        }
        let p = if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() };
        let n = if ln == f64::NEG_INFINITY { 0.0 } else { ln.exp() };
        Ok(p - n)
    }

    pub fn log_pos(&self) -> f64 {
        self.pos.log_total()
    }

    pub fn log_neg(&self) -> f64 {
        self.neg.log_total()
    }

    /// log of the (assumed nonnegative) total, computed without leaving log space
    /// when the negative lane is negligible or moderate.
    pub fn log_total_nonneg(&self) -> f64 {
        let lp = self.pos.log_total();
        let ln = self.neg.log_total();
        if ln == f64::NEG_INFINITY {
            return lp;
        }
        if lp == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        if ln >= lp {
            return f64::NEG_INFINITY;
        }
        lp + (-((ln - lp).exp())).ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_dist_same_anchor_deep() {
        // |e^{-500} e^{i0} - e^{-500} e^{i pi}| = 2 e^{-500}
        let d = log_dist_polar(-500.0, 0.0, -500.0, std::f64::consts::PI);
        assert!((d - (-500.0 + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn log_dist_disparate_scales() {
        let d = log_dist_polar(-3.0, 0.3, -800.0, 1.0);
        assert!((d - (-3.0)).abs() < 1e-12);
    }

    #[test]
    fn log_dist_to_regimes() {
        let d = Point2::new(0.3, 0.0);
        // negligible offset
        let l = log_dist_to(d, LogOffset::new(-900.0, 1.2));
        assert!((l - 0.3f64.ln()).abs() < 1e-14);
        // moderate offset
        let l2 = log_dist_to(d, LogOffset::new((0.1f64).ln(), 0.0));
        assert!((l2 - 0.4f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn logsum_matches_direct() {
        let mut acc = LogSum::new();
        for v in [1.0f64, 2.0, 3.0, 0.5] {
            acc.add(v.ln());
        }
        assert!((acc.total() - 6.5).abs() < 1e-12);
    }

    #[test]
    fn signed_logsum() {
        let mut acc = SignedLogSum::new();
        acc.add_value(5.0);
        acc.add_value(-3.0);
        acc.add_value(0.25);
        assert!((acc.total().unwrap() - 2.25).abs() < 1e-12);
    }
}
