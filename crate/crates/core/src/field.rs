//! Field representations: sums of elementary concentrations around cores,
//! optional smooth backgrounds, optional invertible plane maps, and pointwise
//! cutoffs. Evaluation never materializes tiny radii as Cartesian differences:
//! points may be passed as an anchor plus a log-polar offset, so structure at
//! radius `e^{-1000}` is still resolved exactly.

use crate::error::CcxError;
use crate::geom::{log_dist_to, LogOffset, Point2};
use crate::profile::Profile;
use crate::Result;
use serde::{Deserialize, Serialize};

pub const TWO_PI: f64 = std::f64::consts::TAU;

/// One elementary concentration: value `amp * sqrt(alpha/2pi) psi(-log r / alpha)`
/// at distance `r` from the core.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Triplet {
    pub alpha: f64,
    pub core: Point2,
    pub profile: Profile,
}

impl Triplet {
    pub fn new(alpha: f64, core: Point2, profile: Profile) -> Result<Triplet> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(CcxError::DomainError(format!("alpha = {alpha}")));
        }
        if !core.is_finite() {
            return Err(CcxError::DomainError("non-finite core".into()));
        }
        Ok(Triplet {
            alpha,
            core,
            profile,
        })
    }

    pub fn height(&self) -> f64 {
        (self.alpha / TWO_PI).sqrt()
    }

    /// Value at log-distance `log_r` from the core.
    pub fn value_at_log_r(&self, log_r: f64) -> f64 {
        let y = -log_r / self.alpha;
        self.height() * self.profile.eval(y)
    }

    /// Radial slope factor: the gradient is `slope / r` in the outward
    /// direction with `slope = -sqrt(alpha/2pi) psi'(y) / alpha`.
    pub fn radial_slope_log(&self, log_r: f64) -> f64 {
        let y = -log_r / self.alpha;
        -self.height() * self.profile.deriv(y) / self.alpha
    }
}

/// Invertible plane maps. Evaluation applies the pullback `z = T^{-1}(x)`
/// to its argument, so a field with a linear pullback `M` represents
/// `base(M x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Pullback `z = M x`.
    Linear { m: [[f64; 2]; 2] },
    /// Pullback `z = (x1 + s x2, x2)`.
    Shear { s: f64 },
    /// Pullback `z = x |x|^{gamma - 1}` (radial power map).
    RadialPower { gamma: f64 },
    /// Pullback `z = x (1 + c rho(|x| / r0))` with a smooth compact bump `rho`.
    RadialBump { c: f64, r0: f64 },
}

fn bump_rho(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

fn bump_rho_prime(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        let d = 1.0 - t * t;
        bump_rho(t) * (-2.0 * t / (d * d))
    }
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match self {
            Transform::Linear { m } => {
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                if det == 0.0 || !det.is_finite() {
                    return Err(CcxError::InvalidTransform(format!("det = {det}")));
                }
                Ok(())
            }
            Transform::Shear { s } => {
                if !s.is_finite() {
                    return Err(CcxError::InvalidTransform("non-finite shear".into()));
                }
                Ok(())
            }
            Transform::RadialPower { gamma } => {
                if !(*gamma > 0.0) {
                    return Err(CcxError::InvalidTransform(format!("gamma = {gamma}")));
                }
                Ok(())
            }
            Transform::RadialBump { c, r0 } => {
                if !(*r0 > 0.0) {
                    return Err(CcxError::InvalidTransform(format!("r0 = {r0}")));
                }
                // radial part g(r) = r (1 + c rho(r/r0)) must be strictly increasing
                for k in 0..=400 {
                    let t = k as f64 / 400.0;
                    let d = 1.0 + c * bump_rho(t) + c * t * bump_rho_prime(t);
                    if d <= 0.05 {
                        return Err(CcxError::InvalidTransform(format!(
                            "radial bump not monotone at t = {t}: g' = {d:.3}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    fn linear_matrix(&self) -> Option<[[f64; 2]; 2]> {
        match self {
            Transform::Linear { m } => Some(*m),
            Transform::Shear { s } => Some([[1.0, *s], [0.0, 1.0]]),
            _ => None,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.linear_matrix().is_some()
    }

    /// `z = T^{-1}(x)`: the map applied to evaluation arguments.
    pub fn pullback(&self, p: Point2) -> Result<Point2> {
        match self {
            Transform::Linear { m } => Ok(Point2::new(
                m[0][0] * p.x + m[0][1] * p.y,
                m[1][0] * p.x + m[1][1] * p.y,
            )),
            Transform::Shear { s } => Ok(Point2::new(p.x + s * p.y, p.y)),
            Transform::RadialPower { gamma } => {
                let r = p.norm();
                if r == 0.0 {
                    return Ok(Point2::ORIGIN);
                }
                Ok(p.scale(r.powf(gamma - 1.0)))
            }
            Transform::RadialBump { c, r0 } => {
                let r = p.norm();
                Ok(p.scale(1.0 + c * bump_rho(r / r0)))
            }
        }
    }

    /// `x = T(z)`: inverse of the pullback.
    pub fn pushforward(&self, z: Point2) -> Result<Point2> {
        match self {
            Transform::Linear { m } => {
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                Ok(Point2::new(
                    (m[1][1] * z.x - m[0][1] * z.y) / det,
                    (-m[1][0] * z.x + m[0][0] * z.y) / det,
                ))
            }
            Transform::Shear { s } => Ok(Point2::new(z.x - s * z.y, z.y)),
            Transform::RadialPower { gamma } => {
                let r = z.norm();
                if r == 0.0 {
                    return Ok(Point2::ORIGIN);
                }
                Ok(z.scale(r.powf(1.0 / gamma - 1.0)))
            }
            Transform::RadialBump { c, r0 } => {
                // solve g(r) = r (1 + c rho(r/r0)) = |z| by Newton with bisection guard
                let target = z.norm();
                if target == 0.0 {
                    return Ok(Point2::ORIGIN);
                }
                let g = |r: f64| r * (1.0 + c * bump_rho(r / r0));
                let (mut lo, mut hi) = (0.0_f64, target.max(*r0) * 4.0);
                if g(hi) < target {
                    return Err(CcxError::TransformNotInvertibleAt(z.x, z.y));
                }
                let mut r = target;
                let mut ok = false;
                for _ in 0..200 {
                    let val = g(r) - target;
                    if val.abs() <= 1e-15 * target.max(1.0) {
                        ok = true;
                        break;
                    }
                    if val > 0.0 {
                        hi = r;
                    } else {
                        lo = r;
                    }
                    let d = 1.0 + c * bump_rho(r / r0) + c * (r / r0) * bump_rho_prime(r / r0);
                    let next = r - val / d;
                    r = if next > lo && next < hi {
                        next
                    } else {
                        0.5 * (lo + hi)
                    };
                }
                if !ok && (g(r) - target).abs() > 1e-10 * target.max(1.0) {
                    return Err(CcxError::TransformNotInvertibleAt(z.x, z.y));
                }
                Ok(z.scale(r / target))
            }
        }
    }

    /// Pullback of the offset point `anchor + e^{log_r} e^{i theta}` expressed
    /// as `pullback(anchor) + result`, with `result` in log-polar form.
    pub fn pullback_offset(&self, anchor: Point2, off: LogOffset) -> Result<LogOffset> {
        if let Some(m) = self.linear_matrix() {
            // exact for linear maps at any depth
            let d = Point2::new(
                m[0][0] * off.theta.cos() + m[0][1] * off.theta.sin(),
                m[1][0] * off.theta.cos() + m[1][1] * off.theta.sin(),
            );
            return Ok(LogOffset::new(off.log_r + d.norm().ln(), d.angle()));
        }
        // radial maps about the origin: exact in log form when anchored there
        if anchor.x == 0.0 && anchor.y == 0.0 {
            match self {
                Transform::RadialPower { gamma } => {
                    return Ok(LogOffset::new(gamma * off.log_r, off.theta));
                }
                Transform::RadialBump { c, r0 } => {
                    let t = (off.log_r - r0.ln()).exp();
                    let f = 1.0 + c * bump_rho(t);
                    return Ok(LogOffset::new(off.log_r + f.ln(), off.theta));
                }
                _ => {}
            }
        }
        let za = self.pullback(anchor)?;
        if off.log_r > za.norm().max(1e-300).ln() - 17.0 {
            // offset representable next to the anchor: direct difference
            let p = anchor.add(off.to_vec());
            let z = self.pullback(p)?;
            let d = z.sub(za);
            let n = d.norm();
            if n == 0.0 {
                return Ok(LogOffset::new(f64::NEG_INFINITY, 0.0));
            }
            return Ok(LogOffset::new(n.ln(), d.angle()));
        }
        // linearize through the Jacobian at the anchor
        let j = self.pullback_jacobian(anchor)?;
        let v = Point2::new(off.theta.cos(), off.theta.sin());
        let d = Point2::new(j[0][0] * v.x + j[0][1] * v.y, j[1][0] * v.x + j[1][1] * v.y);
        Ok(LogOffset::new(off.log_r + d.norm().ln(), d.angle()))
    }

    /// Jacobian of the pullback at `p`.
    pub fn pullback_jacobian(&self, p: Point2) -> Result<[[f64; 2]; 2]> {
        if let Some(m) = self.linear_matrix() {
            return Ok(m);
        }
        let (f, fp, r) = match self {
            Transform::RadialPower { gamma } => {
                let r = p.norm();
                if r == 0.0 {
                    return Err(CcxError::AtCore(p.x, p.y));
                }
                (r.powf(*gamma), gamma * r.powf(gamma - 1.0), r)
            }
            Transform::RadialBump { c, r0 } => {
                let r = p.norm();
                if r == 0.0 {
                    let v = 1.0 + c * bump_rho(0.0);
                    return Ok([[v, 0.0], [0.0, v]]);
                }
                let t = r / r0;
                (
                    r * (1.0 + c * bump_rho(t)),
                    1.0 + c * bump_rho(t) + c * t * bump_rho_prime(t),
                    r,
                )
            }
            _ => unreachable!(),
        };
        // radial map z = f(r) x_hat: J = f'(r) P_radial + (f(r)/r) P_tangential
        let (ux, uy) = (p.x / r, p.y / r);
        let a = fp;
        let b = f / r;
        Ok([
            [a * ux * ux + b * uy * uy, (a - b) * ux * uy],
            [(a - b) * ux * uy, a * uy * uy + b * ux * ux],
        ])
    }
}

/// Smooth or indicator backgrounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    /// `value` on the disk `|x - center| < radius`, else 0.
    Disk {
        center: Point2,
        radius: f64,
        value: f64,
    },
    /// `value` on the square `max |x_i - c_i| < half`, else 0.
    Box {
        center: Point2,
        half: f64,
        value: f64,
    },
    /// The flattening family `(1/n) e^{-|x/n|^2}`.
    GaussianFlattening { n: f64 },
    /// Smooth compact bump `height cos^2(pi r / 2 radius)` for `r < radius`.
    CosineBump {
        center: Point2,
        radius: f64,
        height: f64,
    },
    /// Row-major samples on an `n x n` grid over `[-extent, extent]^2`,
    /// bilinear interpolation, zero outside.
    Sampled {
        values: Vec<f64>,
        n: usize,
        extent: f64,
    },
}

impl Background {
    pub fn eval(&self, p: Point2) -> f64 {
        match self {
            Background::Disk {
                center,
                radius,
                value,
            } => {
                if p.dist(*center) <= *radius {
                    *value
                } else {
                    0.0
                }
            }
            Background::Box {
                center,
                half,
                value,
            } => {
                if (p.x - center.x).abs() <= *half && (p.y - center.y).abs() <= *half {
                    *value
                } else {
                    0.0
                }
            }
            Background::GaussianFlattening { n } => {
                let q = (p.x * p.x + p.y * p.y) / (n * n);
                (-q).exp() / n
            }
            Background::CosineBump {
                center,
                radius,
                height,
            } => {
                let r = p.dist(*center);
                if r >= *radius {
                    0.0
                } else {
                    let c = (std::f64::consts::FRAC_PI_2 * r / radius).cos();
                    height * c * c
                }
            }
            Background::Sampled { values, n, extent } => {
                let nn = *n;
                let h = 2.0 * extent / (nn as f64 - 1.0);
                let fx = (p.x + extent) / h;
                let fy = (p.y + extent) / h;
                if fx < 0.0 || fy < 0.0 || fx > (nn - 1) as f64 || fy > (nn - 1) as f64 {
                    return 0.0;
                }
                let i = (fx as usize).min(nn - 2);
                let j = (fy as usize).min(nn - 2);
                let tx = fx - i as f64;
                let ty = fy - j as f64;
                let v00 = values[j * nn + i];
                let v10 = values[j * nn + i + 1];
                let v01 = values[(j + 1) * nn + i];
                let v11 = values[(j + 1) * nn + i + 1];
                v00 * (1.0 - tx) * (1.0 - ty)
                    + v10 * tx * (1.0 - ty)
                    + v01 * (1.0 - tx) * ty
                    + v11 * tx * ty
            }
        }
    }

    pub fn gradient(&self, p: Point2) -> Point2 {
        match self {
            Background::Disk { .. } | Background::Box { .. } => Point2::ORIGIN,
            Background::GaussianFlattening { n } => {
                let q = (p.x * p.x + p.y * p.y) / (n * n);
                let c = (-q).exp() / n * (-2.0 / (n * n));
                Point2::new(c * p.x, c * p.y)
            }
            Background::CosineBump {
                center,
                radius,
                height,
            } => {
                let d = p.sub(*center);
                let r = d.norm();
                if r >= *radius || r == 0.0 {
                    return Point2::ORIGIN;
                }
                let a = std::f64::consts::FRAC_PI_2 / radius;
                let slope = -height * 2.0 * (a * r).cos() * (a * r).sin() * a;
                d.scale(slope / r)
            }
            Background::Sampled { values, n, extent } => {
                let nn = *n;
                let h = 2.0 * extent / (nn as f64 - 1.0);
                let fx = (p.x + extent) / h;
                let fy = (p.y + extent) / h;
                if fx < 0.0 || fy < 0.0 || fx > (nn - 1) as f64 || fy > (nn - 1) as f64 {
                    return Point2::ORIGIN;
                }
                let i = (fx as usize).min(nn - 2);
                let j = (fy as usize).min(nn - 2);
                let tx = fx - i as f64;
                let ty = fy - j as f64;
                let v00 = values[j * nn + i];
                let v10 = values[j * nn + i + 1];
                let v01 = values[(j + 1) * nn + i];
                let v11 = values[(j + 1) * nn + i + 1];
                let gx = ((v10 - v00) * (1.0 - ty) + (v11 - v01) * ty) / h;
                let gy = ((v01 - v00) * (1.0 - tx) + (v11 - v10) * tx) / h;
                Point2::new(gx, gy)
            }
        }
    }

    /// Radius of a disk about the origin containing the (effective) support.
    pub fn support_radius(&self) -> f64 {
        match self {
            Background::Disk { center, radius, .. } => center.norm() + radius,
            Background::Box { center, half, .. } => center.norm() + half * 2.0f64.sqrt(),
            Background::GaussianFlattening { n } => 7.0 * n,
            Background::CosineBump { center, radius, .. } => center.norm() + radius,
            Background::Sampled { extent, .. } => extent * 2.0f64.sqrt(),
        }
    }

    /// Center for radial quadrature, when the background is radial about a point.
    pub fn radial_center(&self) -> Option<Point2> {
        match self {
            Background::Disk { center, .. } => Some(*center),
            Background::GaussianFlattening { .. } => Some(Point2::ORIGIN),
            Background::CosineBump { center, .. } => Some(*center),
            _ => None,
        }
    }

    /// Radii about `radial_center` where the background has kinks.
    pub fn kink_radii(&self) -> Vec<f64> {
        match self {
            Background::Disk { radius, .. } => vec![*radius],
            Background::CosineBump { radius, .. } => vec![*radius],
            _ => vec![],
        }
    }
}

/// Pointwise odd cutoff applied to the whole field:
/// `u -> sqrt(alpha/2pi) Theta_a^M( sqrt(2pi/alpha) u )`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub alpha: f64,
    pub a: f64,
    pub m: f64,
}

/// The four-branch odd cutoff: 0 on `[0, a/2]`, `2s - a` on `[a/2, a]`,
/// `s` on `[a, M]`, `M` past `M`; odd extension for `s < 0`.
pub fn cutoff_theta(a: f64, m: f64, s: f64) -> Result<f64> {
    if !(a > 0.0 && a < m) {
        return Err(CcxError::BadRange(a, m));
    }
    let x = s.abs();
    let v = if x <= 0.5 * a {
        0.0
    } else if x <= a {
        2.0 * x - a
    } else if x <= m {
        x
    } else {
        m
    };
    Ok(if s < 0.0 { -v } else { v })
}

fn cutoff_theta_deriv(a: f64, m: f64, s: f64) -> f64 {
    let x = s.abs();
    if x <= 0.5 * a || x >= m {
        0.0
    } else if x <= a {
        2.0
    } else {
        1.0
    }
}

/// One additive component of a field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldPart {
    pub amp: f64,
    pub triplet: Triplet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
}

impl FieldPart {
    /// Physical location of the concentration structure.
    pub fn physical_core(&self) -> Result<Point2> {
        match &self.transform {
            None => Ok(self.triplet.core),
            Some(t) => t.pushforward(self.triplet.core),
        }
    }
}

/// An evaluable scalar field on the plane with declared support radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Field {
    pub parts: Vec<FieldPart>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<Background>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<CutoffSpec>,
    pub support_radius: f64,
}

/// Gradient vector carried as `e^{log_scale} * dir` with `dir` of moderate
/// magnitude, so gradients of deep concentrations never overflow.
#[derive(Debug, Clone, Copy)]
pub struct LogGrad {
    pub log_scale: f64,
    pub dir: Point2,
}

impl LogGrad {
    pub const ZERO: LogGrad = LogGrad {
        log_scale: f64::NEG_INFINITY,
        dir: Point2 { x: 0.0, y: 0.0 },
    };

    pub fn from_vec(v: Point2) -> LogGrad {
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            return LogGrad::ZERO;
        }
        LogGrad {
            log_scale: n.ln(),
            dir: v.scale(1.0 / n),
        }
    }

    pub fn log_norm(&self) -> f64 {
        let n = self.dir.norm();
        if n == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.log_scale + n.ln()
        }
    }

    /// Squared norm; underflows gracefully to zero for very deep gradients.
    pub fn norm_sq(&self) -> f64 {
        let l = self.log_norm();
        if l == f64::NEG_INFINITY {
            0.0
        } else {
            (2.0 * l).exp()
        }
    }

    pub fn to_vec(&self) -> Point2 {
        if self.log_scale == f64::NEG_INFINITY {
            return Point2::ORIGIN;
        }
        self.dir.scale(self.log_scale.exp())
    }

    fn accumulate(items: &[LogGrad]) -> LogGrad {
        let mut max = f64::NEG_INFINITY;
        for it in items {
            if it.log_scale > max && it.dir.norm() > 0.0 {
                max = it.log_scale;
            }
        }
        if max == f64::NEG_INFINITY {
            return LogGrad::ZERO;
        }
        let mut acc = Point2::ORIGIN;
        for it in items {
            if it.log_scale == f64::NEG_INFINITY {
                continue;
            }
            let w = (it.log_scale - max).exp();
            acc = acc.add(it.dir.scale(w));
        }
        LogGrad {
            log_scale: max,
            dir: acc,
        }
    }
}

impl Field {
    pub fn zero() -> Field {
        Field {
            parts: vec![],
            background: None,
            cutoff: None,
            support_radius: 1.0,
        }
    }

    pub fn from_parts(parts: Vec<FieldPart>, support_radius: f64) -> Field {
        Field {
            parts,
            background: None,
            cutoff: None,
            support_radius,
        }
    }

    pub fn single(t: Triplet) -> Field {
        let r = t.core.norm() + 1.0;
        Field::from_parts(
            vec![FieldPart {
                amp: 1.0,
                triplet: t,
                transform: None,
            }],
            r,
        )
    }

    pub fn with_part(mut self, amp: f64, t: Triplet) -> Field {
        self.support_radius = self.support_radius.max(t.core.norm() + 1.0);
        self.parts.push(FieldPart {
            amp,
            triplet: t,
            transform: None,
        });
        self
    }

    pub fn with_cutoff(mut self, alpha: f64, a: f64, m: f64) -> Result<Field> {
        if !(a > 0.0 && a < m) {
            return Err(CcxError::BadRange(a, m));
        }
        self.cutoff = Some(CutoffSpec { alpha, a, m });
        Ok(self)
    }

    pub fn is_zero_descriptor(&self) -> bool {
        self.parts.is_empty() && self.background.is_none()
    }

    fn apply_cutoff_value(&self, v: f64) -> f64 {
        match &self.cutoff {
            None => v,
            Some(c) => {
                let h = (c.alpha / TWO_PI).sqrt();
                h * cutoff_theta(c.a, c.m, v / h).unwrap_or(0.0)
            }
        }
    }

    /// Evaluate at an absolute point.
    pub fn evaluate(&self, p: Point2) -> Result<f64> {
        if !p.is_finite() {
            return Err(CcxError::DomainError("non-finite point".into()));
        }
        if p.norm() > self.support_radius {
            return Ok(0.0);
        }
        let mut v = 0.0;
        for part in &self.parts {
            let z = match &part.transform {
                None => p,
                Some(t) => t.pullback(p)?,
            };
            let d = z.dist(part.triplet.core);
            let log_r = if d > 0.0 { d.ln() } else { f64::NEG_INFINITY };
            v += part.amp * part.triplet.value_at_log_r(log_r);
        }
        if let Some(bg) = &self.background {
            v += bg.eval(p);
        }
        Ok(self.apply_cutoff_value(v))
    }

    /// Evaluate at `anchor + e^{log_r} e^{i theta}` with full depth precision.
    pub fn eval_at_offset(&self, anchor: Point2, off: LogOffset) -> Result<f64> {
        let pr = log_dist_to(anchor, off).exp();
        if pr > self.support_radius {
            return Ok(0.0);
        }
        Ok(self.apply_cutoff_value(self.eval_raw(anchor, off)?))
    }

    fn eval_raw(&self, anchor: Point2, off: LogOffset) -> Result<f64> {
        let mut v = 0.0;
        for part in &self.parts {
            let log_r = self.part_log_dist(part, anchor, off)?;
            v += part.amp * part.triplet.value_at_log_r(log_r);
        }
        if let Some(bg) = &self.background {
            v += bg.eval(anchor.add(off.to_vec()));
        }
        Ok(v)
    }

    /// log-distance from the offset point to the part's core, computed in
    /// whichever coordinates keep full relative precision.
    fn part_log_dist(&self, part: &FieldPart, anchor: Point2, off: LogOffset) -> Result<f64> {
        match &part.transform {
            None => {
                let d = anchor.sub(part.triplet.core);
                Ok(log_dist_to(d, off))
            }
            Some(t) => {
                let za = t.pullback(anchor)?;
                let zoff = t.pullback_offset(anchor, off)?;
                let d = za.sub(part.triplet.core);
                Ok(log_dist_to(d, zoff))
            }
        }
    }

    /// Gradient at an absolute point. `AtCore` when `p` coincides with a core.
    pub fn gradient(&self, p: Point2) -> Result<Point2> {
        let g = self.gradient_log(p, LogOffset::new(f64::NEG_INFINITY, 0.0))?;
        Ok(g.to_vec())
    }

    /// Gradient at `anchor + offset`, in log-scaled form.
    pub fn gradient_at_offset(&self, anchor: Point2, off: LogOffset) -> Result<LogGrad> {
        self.gradient_log(anchor, off)
    }

    fn gradient_log(&self, anchor: Point2, off: LogOffset) -> Result<LogGrad> {
        let pr = log_dist_to(anchor, off).exp();
        if pr > self.support_radius {
            return Ok(LogGrad::ZERO);
        }
        let mut grads: Vec<LogGrad> = Vec::with_capacity(self.parts.len() + 1);
        for part in &self.parts {
            grads.push(self.part_gradient(part, anchor, off)?);
        }
        if let Some(bg) = &self.background {
            let p = anchor.add(off.to_vec());
            grads.push(LogGrad::from_vec(bg.gradient(p)));
        }
        let mut total = LogGrad::accumulate(&grads);
        if let Some(c) = &self.cutoff {
            let v = self.eval_raw(anchor, off)?;
            let h = (c.alpha / TWO_PI).sqrt();
            let dp = cutoff_theta_deriv(c.a, c.m, v / h);
            if dp == 0.0 {
                return Ok(LogGrad::ZERO);
            }
            total.dir = total.dir.scale(dp);
        }
        Ok(total)
    }

    fn part_gradient(&self, part: &FieldPart, anchor: Point2, off: LogOffset) -> Result<LogGrad> {
        match &part.transform {
            None => {
                let d = anchor.sub(part.triplet.core);
                let (log_r, dir) = radial_dir(d, off);
                if log_r == f64::NEG_INFINITY {
                    return Err(CcxError::AtCore(part.triplet.core.x, part.triplet.core.y));
                }
                let slope = part.amp * part.triplet.radial_slope_log(log_r);
                if slope == 0.0 {
                    return Ok(LogGrad::ZERO);
                }
                Ok(LogGrad {
                    log_scale: slope.abs().ln() - log_r,
                    dir: dir.scale(slope.signum()),
                })
            }
            Some(t) => {
                let za = t.pullback(anchor)?;
                let zoff = t.pullback_offset(anchor, off)?;
                let d = za.sub(part.triplet.core);
                let (log_r, dir) = radial_dir(d, zoff);
                if log_r == f64::NEG_INFINITY {
                    return Err(CcxError::AtCore(part.triplet.core.x, part.triplet.core.y));
                }
                let slope = part.amp * part.triplet.radial_slope_log(log_r);
                if slope == 0.0 {
                    return Ok(LogGrad::ZERO);
                }
                // grad_x = J_pullback(x)^T grad_z
                let p = anchor.add(off.to_vec());
                let j = t.pullback_jacobian(p)?;
                let gz = dir.scale(slope.signum());
                let gx = Point2::new(
                    j[0][0] * gz.x + j[1][0] * gz.y,
                    j[0][1] * gz.x + j[1][1] * gz.y,
                );
                Ok(LogGrad {
                    log_scale: slope.abs().ln() - log_r,
                    dir: gx,
                })
            }
        }
    }

    /// Physical core positions of all parts.
    pub fn physical_cores(&self) -> Result<Vec<Point2>> {
        let mut out = Vec::with_capacity(self.parts.len());
        for p in &self.parts {
            out.push(p.physical_core()?);
        }
        Ok(out)
    }

    /// True when the whole field is radial about `center`: single concentration
    /// anchored there with an absent or radial transform, and a background
    /// (if any) radial about the same point.
    pub fn radial_about(&self, center: Point2) -> bool {
        let conc_ok = match self.parts.len() {
            0 => true,
            1 => {
                let p = &self.parts[0];
                let core_ok = p.triplet.core == center;
                match &p.transform {
                    None => core_ok,
                    Some(Transform::RadialPower { .. }) | Some(Transform::RadialBump { .. }) => {
                        core_ok && center == Point2::ORIGIN
                    }
                    _ => false,
                }
            }
            _ => false,
        };
        let bg_ok = match &self.background {
            None => true,
            Some(b) => b.radial_center() == Some(center),
        };
        conc_ok && bg_ok
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.parts {
            if let Some(t) = &p.transform {
                t.validate()?;
            }
        }
        if !(self.support_radius > 0.0) {
            return Err(CcxError::InvalidDescriptor(format!(
                "support_radius = {}",
                self.support_radius
            )));
        }
        Ok(())
    }
}

/// Direction (unit vector core -> point) and log-distance of `d + off`,
/// stable across all magnitude regimes.
fn radial_dir(d: Point2, off: LogOffset) -> (f64, Point2) {
    let dn = d.norm();
    if dn == 0.0 {
        if off.log_r == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, Point2::ORIGIN);
        }
        return (off.log_r, Point2::new(off.theta.cos(), off.theta.sin()));
    }
    if off.log_r > dn.ln() - 30.0 {
        let w = d.add(off.to_vec());
        let n = w.norm();
        if n == 0.0 {
            return (f64::NEG_INFINITY, Point2::ORIGIN);
        }
        return (n.ln(), w.scale(1.0 / n));
    }
    (dn.ln(), d.scale(1.0 / dn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::moser_profile;

    fn moser_field(alpha: f64) -> Field {
        Field::single(Triplet::new(alpha, Point2::ORIGIN, moser_profile()).unwrap())
    }

    #[test]
    fn moser_values() {
        let f = moser_field(40.0);
        let h = (40.0 / TWO_PI).sqrt();
        let v = f.evaluate(Point2::new((-41.0f64).exp(), 0.0)).unwrap();
        assert!((v - h).abs() < 1e-12);
        assert_eq!(f.evaluate(Point2::new(1.5, 0.0)).unwrap(), 0.0);
        // |p| = e^{-alpha/2}: value sqrt(alpha / 8 pi)
        let r = (-20.0f64).exp();
        let v = f.evaluate(Point2::new(0.0, r)).unwrap();
        assert!((v - (40.0 / (8.0 * std::f64::consts::PI)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn deep_offset_evaluation() {
        let f = moser_field(200.0);
        let h = (200.0 / TWO_PI).sqrt();
        // radius e^{-150}: profile value 0.75
        let v = f
            .eval_at_offset(Point2::ORIGIN, LogOffset::new(-150.0, 1.0))
            .unwrap();
        assert!((v - 0.75 * h).abs() < 1e-12);
        // radius e^{-900}: far past f64 underflow, still the plateau
        let v = f
            .eval_at_offset(Point2::ORIGIN, LogOffset::new(-900.0, 0.3))
            .unwrap();
        assert!((v - h).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_formula() {
        let f = moser_field(30.0);
        let r = (-15.0f64).exp();
        let g = f.gradient(Point2::new(r, 0.0)).unwrap();
        let expect = 1.0 / ((2.0 * 30.0 * std::f64::consts::PI).sqrt() * r);
        assert!((g.norm() - expect).abs() / expect < 1e-12);
        assert!(g.x < 0.0, "points inward, toward growth of the profile");
        // flat plateau: zero gradient
        let g = f.gradient(Point2::new((-31.0f64).exp(), 0.0)).unwrap();
        assert_eq!(g.norm(), 0.0);
        // outside support
        let g = f.gradient(Point2::new(2.0, 0.0)).unwrap();
        assert_eq!(g.norm(), 0.0);
        // at core: error
        assert!(matches!(
            f.gradient(Point2::ORIGIN),
            Err(CcxError::AtCore(_, _))
        ));
    }

    #[test]
    fn cutoff_theta_branches() {
        let a = 2.0;
        let m = 10.0;
        assert_eq!(cutoff_theta(a, m, 0.5).unwrap(), 0.0); // s = a/4
        assert_eq!(cutoff_theta(a, m, 6.0).unwrap(), 6.0); // s = (a+M)/2
        assert_eq!(cutoff_theta(a, m, 20.0).unwrap(), 10.0); // s = 2M
        assert_eq!(cutoff_theta(a, m, 1.5).unwrap(), 1.0); // 2s - a branch
        assert_eq!(cutoff_theta(a, m, -6.0).unwrap(), -6.0); // odd
        assert!(cutoff_theta(3.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn linear_transform_pullback() {
        // u(x) = f_alpha(2 x1, 0.5 x2)
        let t = Transform::Linear {
            m: [[2.0, 0.0], [0.0, 0.5]],
        };
        let f = Field {
            parts: vec![FieldPart {
                amp: 1.0,
                triplet: Triplet::new(20.0, Point2::ORIGIN, moser_profile()).unwrap(),
                transform: Some(t),
            }],
            background: None,
            cutoff: None,
            support_radius: 2.5,
        };
        let va = f.evaluate(Point2::new(0.3, 0.0)).unwrap();
        let vb = moser_field(20.0).evaluate(Point2::new(0.6, 0.0)).unwrap();
        assert!((va - vb).abs() < 1e-14);
    }

    #[test]
    fn radial_bump_roundtrip() {
        let t = Transform::RadialBump { c: 0.3, r0: 0.5 };
        t.validate().unwrap();
        let p = Point2::new(0.21, -0.13);
        let z = t.pullback(p).unwrap();
        let back = t.pushforward(z).unwrap();
        assert!(back.dist(p) < 1e-12);
        // bump amplitude past the monotonicity threshold is not invertible
        assert!(Transform::RadialBump { c: -3.0, r0: 0.5 }.validate().is_err());
    }

    #[test]
    fn transform_offset_precision() {
        let t = Transform::Linear {
            m: [[3.0, 0.0], [0.0, 3.0]],
        };
        let off = LogOffset::new(-500.0, 0.7);
        let z = t.pullback_offset(Point2::ORIGIN, off).unwrap();
        assert!((z.log_r - (-500.0 + 3.0f64.ln())).abs() < 1e-12);
    }
}
