//! Multi-scale quadrature over the plane. Each concentration core owns a
//! log-polar patch clipped to its Voronoi cell inside the support disk, with
//! radial panels aligned to the profile knots of the local concentrations,
//! so integrands concentrated at radius `e^{-alpha}` for `alpha` up to a few
//! hundred are resolved without ever leaving log coordinates. Measures are
//! carried as logs throughout; accumulation is log-sum-exp with a fixed
//! sequential order.

use crate::error::CcxError;
use crate::field::{Field, LogGrad};
use crate::geom::{LogOffset, LogSum, Point2, SignedLogSum};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Node counts and truncation thresholds for the multi-scale rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Gauss-Legendre nodes per log-radial patch unit; controls both panel
    /// width (8/y_nodes nats) and the per-panel order (y_nodes/8, clamped).
    pub y_nodes: usize,
    /// Total angular nodes around each core.
    pub theta_nodes: usize,
    /// Log-radial truncation in scale units: patches descend to radius
    /// `e^{-alpha y_max}` around a core of scale `alpha`.
    pub y_max: f64,
    /// Cartesian panels per axis for background-only fields.
    pub far_field_nodes: usize,
    /// Cells whose log-contribution sits this many nats below the running
    /// maximum are dropped by the accumulator.
    pub weight_floor: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            y_nodes: 32,
            theta_nodes: 64,
            y_max: 5.0,
            far_field_nodes: 64,
            weight_floor: 60.0,
        }
    }
}

impl QuadratureSpec {
    pub fn fast() -> Self {
        QuadratureSpec {
            y_nodes: 16,
            theta_nodes: 32,
            y_max: 4.0,
            far_field_nodes: 32,
            weight_floor: 50.0,
        }
    }

    pub fn accurate() -> Self {
        QuadratureSpec {
            y_nodes: 48,
            theta_nodes: 128,
            y_max: 6.0,
            far_field_nodes: 96,
            weight_floor: 70.0,
        }
    }

    /// Preset selected by the `CCX_QUAD_PROFILE` environment variable.
    pub fn from_env() -> Self {
        match std::env::var("CCX_QUAD_PROFILE").as_deref() {
            Ok("fast") => Self::fast(),
            Ok("accurate") => Self::accurate(),
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_nodes < 16 || self.theta_nodes < 32 || self.y_max < 3.0 {
            return Err(CcxError::DomainError(
                "quadrature spec below minimum resolution".into(),
            ));
        }
        Ok(())
    }

    fn panel_width(&self) -> f64 {
        8.0 / self.y_nodes as f64
    }

    fn radial_order(&self) -> usize {
        (self.y_nodes / 8).clamp(2, 8)
    }
}

/// Restriction of an integral to a subset of the plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    All,
    Disk { center: Point2, radius: f64 },
    Annulus { center: Point2, r_in: f64, r_out: f64 },
    Outside { center: Point2, radius: f64 },
    HalfPlane { point: Point2, normal: Point2 },
}

impl Region {
    pub fn contains(&self, p: Point2) -> bool {
        match self {
            Region::All => true,
            Region::Disk { center, radius } => p.dist(*center) <= *radius,
            Region::Annulus { center, r_in, r_out } => {
                let d = p.dist(*center);
                d >= *r_in && d <= *r_out
            }
            Region::Outside { center, radius } => p.dist(*center) >= *radius,
            Region::HalfPlane { point, normal } => p.sub(*point).dot(*normal) >= 0.0,
        }
    }

    /// True when this restriction is rotationally symmetric about `c`.
    fn radial_about(&self, c: Point2) -> bool {
        match self {
            Region::All => true,
            Region::Disk { center, .. }
            | Region::Annulus { center, .. }
            | Region::Outside { center, .. } => *center == c,
            Region::HalfPlane { .. } => false,
        }
    }

    fn circles(&self) -> Vec<(Point2, f64)> {
        match self {
            Region::All | Region::HalfPlane { .. } => vec![],
            Region::Disk { center, radius } | Region::Outside { center, radius } => {
                vec![(*center, *radius)]
            }
            Region::Annulus { center, r_in, r_out } => {
                vec![(*center, *r_in), (*center, *r_out)]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gauss-Legendre nodes

fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on P_n, standard construction.
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for k in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for j in 2..=n {
            let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[k] = -x;
        ws[k] = w;
        xs[n - 1 - k] = x;
        ws[n - 1 - k] = w;
    }
    if n == 1 {
        xs[0] = 0.0;
        ws[0] = 2.0;
    }
    (xs, ws)
}

fn gl_rule(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static CACHE: OnceLock<Mutex<HashMap<usize, &'static (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(n)
        .or_insert_with(|| Box::leak(Box::new(legendre_rule(n))))
}

// ---------------------------------------------------------------------------
// Patch geometry

#[derive(Debug, Clone)]
enum UpperLimit {
    /// Voronoi bisector toward a neighbor at distance `d`, direction `phi`.
    Bisector { d: f64, phi: f64 },
    /// Stay inside the circle `|xi - e| <= radius` (patch center inside it).
    InsideCircle { e: Point2, radius: f64 },
}

impl UpperLimit {
    fn bound(&self, theta: f64) -> f64 {
        match self {
            UpperLimit::Bisector { d, phi } => {
                let c = (theta - phi).cos();
                if c > 1e-14 {
                    0.5 * d / c
                } else {
                    f64::INFINITY
                }
            }
            UpperLimit::InsideCircle { e, radius } => {
                // farthest ray-circle intersection: r = e.d + sqrt(R^2 - |e|^2 + (e.d)^2)
                let ed = e.x * theta.cos() + e.y * theta.sin();
                let disc = radius * radius - e.dot(*e) + ed * ed;
                if disc <= 0.0 {
                    return 0.0;
                }
                (ed + disc.sqrt()).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Patch {
    center: Point2,
    limits: Vec<UpperLimit>,
    /// ascending t = -log r panel knots spanning the full radial range
    knots: Vec<f64>,
    /// deep truncation: one constant cell covers r < e^{-deep_t}
    deep_t: f64,
    theta_panels: Vec<(f64, f64)>,
    /// single angular node of weight 2 pi
    radial_symmetric: bool,
}

/// A quadrature node with its log measure weight. `log_r`/`theta` are polar
/// coordinates relative to `center`; absolute positions follow as
/// `center + e^{log_r} e^{i theta}` (which may underflow to `center`).
#[derive(Debug, Clone, Copy)]
pub struct Node {
    pub patch: u32,
    pub center: Point2,
    pub log_r: f64,
    pub theta: f64,
    pub log_w: f64,
}

impl Node {
    pub fn offset(&self) -> LogOffset {
        LogOffset::new(self.log_r, self.theta)
    }

    pub fn position(&self) -> Point2 {
        self.center.add(self.offset().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    patches: Vec<Patch>,
    cartesian: Option<CartesianRule>,
}

#[derive(Debug, Clone)]
struct CartesianRule {
    x0: f64,
    y0: f64,
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
}

fn wrap_angle(t: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = t % two_pi;
    if x < 0.0 {
        x += two_pi;
    }
    x
}

/// Gather the kink radii of a field part as seen from a patch center at
/// distance `d`: each structural circle of radius `rho` around the part core
/// crosses the rays at radii in `[|d - rho|, d + rho]`.
fn foreign_knots(t_vals: &mut Vec<f64>, d: f64, rho: f64) {
    if rho <= 0.0 {
        return;
    }
    let hi = d + rho;
    if hi > 0.0 {
        t_vals.push(-hi.ln());
    }
    let lo = (d - rho).abs();
    if lo > 0.0 {
        t_vals.push(-lo.ln());
    }
}

impl Partition {
    pub fn build(field: &Field, spec: &QuadratureSpec, region: &Region) -> Result<Partition> {
        let mut centers: Vec<Point2> = Vec::new();
        for part in &field.parts {
            let c = part.physical_core()?;
            if !centers.iter().any(|q| *q == c) {
                centers.push(c);
            }
        }
        if let Some(bg) = &field.background {
            if let Some(c) = bg.radial_center() {
                if !centers.iter().any(|q| *q == c) {
                    centers.push(c);
                }
            } else if centers.is_empty() {
                // pure non-radial background: aligned Cartesian panels
                return Ok(Partition {
                    patches: vec![],
                    cartesian: Some(Self::cartesian_rule(field, spec)),
                });
            }
            // non-radial background alongside concentrations is folded into
            // the polar patches; bilinear cell kinks are below the tolerance
            // of every consumer of such mixed fields
        }
        if centers.is_empty() {
            return Ok(Partition {
                patches: vec![],
                cartesian: None,
            });
        }
        centers.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());

        let r_glob = field.support_radius;
        let mut patches = Vec::with_capacity(centers.len());
        for (idx, &c) in centers.iter().enumerate() {
            patches.push(Self::build_patch(field, spec, region, &centers, idx, c, r_glob)?);
        }
        Ok(Partition {
            patches,
            cartesian: None,
        })
    }

    fn cartesian_rule(field: &Field, spec: &QuadratureSpec) -> CartesianRule {
        match field.background.as_ref().unwrap() {
            crate::field::Background::Sampled { n, extent, .. } => {
                let cells = (*n - 1).max(1);
                CartesianRule {
                    x0: -extent,
                    y0: -extent,
                    nx: cells,
                    ny: cells,
                    hx: 2.0 * extent / cells as f64,
                    hy: 2.0 * extent / cells as f64,
                }
            }
            crate::field::Background::Box { center, half, .. } => {
                let n = spec.far_field_nodes.max(8);
                CartesianRule {
                    x0: center.x - half,
                    y0: center.y - half,
                    nx: n,
                    ny: n,
                    hx: 2.0 * half / n as f64,
                    hy: 2.0 * half / n as f64,
                }
            }
            _ => {
                let n = spec.far_field_nodes.max(8);
                let r = field.support_radius;
                CartesianRule {
                    x0: -r,
                    y0: -r,
                    nx: n,
                    ny: n,
                    hx: 2.0 * r / n as f64,
                    hy: 2.0 * r / n as f64,
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_patch(
        field: &Field,
        spec: &QuadratureSpec,
        region: &Region,
        centers: &[Point2],
        idx: usize,
        c: Point2,
        r_glob: f64,
    ) -> Result<Patch> {
        // --- upper limits: Voronoi bisectors + the support circle
        let mut limits = Vec::new();
        let mut d_min = f64::INFINITY;
        for (j, &o) in centers.iter().enumerate() {
            if j == idx {
                continue;
            }
            let d = c.dist(o);
            d_min = d_min.min(d);
            limits.push(UpperLimit::Bisector {
                d,
                phi: o.sub(c).angle(),
            });
        }
        limits.push(UpperLimit::InsideCircle {
            e: Point2::ORIGIN.sub(c),
            radius: r_glob,
        });

        // --- local scale and radial knots
        let mut alpha_max: f64 = 1.0;
        let mut t_vals: Vec<f64> = Vec::new();
        for part in &field.parts {
            let pc = part.physical_core()?;
            let alpha = part.triplet.alpha;
            if pc == c && part.transform.is_none() {
                alpha_max = alpha_max.max(alpha);
                for s in part.triplet.profile.grid() {
                    t_vals.push(alpha * s);
                }
            } else if pc == c {
                // transformed concentration anchored here: knots distorted but
                // log-comparable; use the profile knots as a guide
                alpha_max = alpha_max.max(alpha);
                for s in part.triplet.profile.grid() {
                    t_vals.push(alpha * s);
                }
            } else {
                let d = c.dist(pc);
                // support edge and plateau edge of the foreign part
                foreign_knots(&mut t_vals, d, 1.0);
                let deep_rho = (-alpha * part.triplet.profile.s_max()).exp();
                foreign_knots(&mut t_vals, d, deep_rho);
                foreign_knots(&mut t_vals, d, 0.0);
                if d > 0.0 {
                    t_vals.push(-d.ln());
                }
            }
        }
        if let Some(bg) = &field.background {
            if let Some(bc) = bg.radial_center() {
                let d = c.dist(bc);
                for rho in bg.kink_radii() {
                    if d == 0.0 {
                        t_vals.push(-rho.ln());
                    } else {
                        foreign_knots(&mut t_vals, d, rho);
                    }
                }
            }
        }
        for (rc, rr) in region.circles() {
            let d = c.dist(rc);
            if d == 0.0 {
                if rr > 0.0 {
                    t_vals.push(-rr.ln());
                }
            } else {
                foreign_knots(&mut t_vals, d, rr);
            }
        }

        let mut deep_t = alpha_max * spec.y_max;
        if d_min.is_finite() && d_min > 0.0 {
            deep_t = deep_t.max(-(d_min / 8.0).ln() + 3.0);
        }
        let t_lo = -(2.0 * r_glob).ln(); // below any possible outer radius
        t_vals.push(t_lo);
        t_vals.push(deep_t);
        t_vals.retain(|t| t.is_finite() && *t >= t_lo && *t <= deep_t);
        t_vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        t_vals.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        // fill gaps to the target panel width
        let w_max = spec.panel_width();
        let mut knots = Vec::with_capacity(t_vals.len() * 2);
        for w in t_vals.windows(2) {
            knots.push(w[0]);
            let gap = w[1] - w[0];
            if gap > w_max {
                let m = (gap / w_max).ceil() as usize;
                for j in 1..m {
                    knots.push(w[0] + gap * j as f64 / m as f64);
                }
            }
        }
        knots.push(*t_vals.last().unwrap());

        // --- angular panels
        let radial_symmetric = field.radial_about(c) && region.radial_about(c) && centers.len() == 1;
        let theta_panels = if radial_symmetric {
            vec![(0.0, std::f64::consts::TAU)]
        } else {
            let mut corners: Vec<f64> = Vec::new();
            Self::corner_angles(&limits, region, c, &mut corners);
            let two_pi = std::f64::consts::TAU;
            corners.iter_mut().for_each(|t| *t = wrap_angle(*t));
            corners.push(0.0);
            corners.sort_by(|a, b| a.partial_cmp(b).unwrap());
            corners.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            let base = (spec.theta_nodes / 4).max(4);
            let mut panels = Vec::new();
            let n = corners.len();
            for i in 0..n {
                let a = corners[i];
                let b = if i + 1 < n { corners[i + 1] } else { two_pi };
                let arc = b - a;
                if arc <= 1e-12 {
                    continue;
                }
                let m = ((arc / (two_pi / base as f64)).ceil() as usize).max(1);
                for j in 0..m {
                    panels.push((a + arc * j as f64 / m as f64, a + arc * (j + 1) as f64 / m as f64));
                }
            }
            panels
        };

        Ok(Patch {
            center: c,
            limits,
            knots,
            deep_t,
            theta_panels,
            radial_symmetric,
        })
    }

    /// Candidate angular corner points: pairwise intersections of the limit
    /// curves (bisector lines, support circle, region circles and lines), each
    /// solvable in closed form in patch-relative coordinates.
    fn corner_angles(limits: &[UpperLimit], region: &Region, c: Point2, out: &mut Vec<f64>) {
        let mut lines: Vec<(Point2, f64)> = Vec::new(); // (unit normal, offset): x.n = q
        let mut circles: Vec<(Point2, f64)> = Vec::new(); // (center rel, radius)
        for l in limits {
            match l {
                UpperLimit::Bisector { d, phi } => {
                    lines.push((Point2::new(phi.cos(), phi.sin()), 0.5 * d));
                }
                UpperLimit::InsideCircle { e, radius } => circles.push((*e, *radius)),
            }
        }
        for (rc, rr) in region.circles() {
            circles.push((rc.sub(c), rr));
        }
        if let Region::HalfPlane { point, normal } = region {
            let n = normal.scale(1.0 / normal.norm().max(1e-300));
            lines.push((n, point.sub(c).dot(n)));
        }

        // bisector validity window edges
        for (n, _) in &lines {
            let phi = n.angle();
            out.push(phi + std::f64::consts::FRAC_PI_2);
            out.push(phi - std::f64::consts::FRAC_PI_2);
        }
        // line-line
        for i in 0..lines.len() {
            for j in i + 1..lines.len() {
                let (n1, q1) = lines[i];
                let (n2, q2) = lines[j];
                let det = n1.x * n2.y - n1.y * n2.x;
                if det.abs() > 1e-14 {
                    let x = (q1 * n2.y - q2 * n1.y) / det;
                    let y = (n1.x * q2 - n2.x * q1) / det;
                    out.push(Point2::new(x, y).angle());
                }
            }
        }
        // line-circle
        for &(n, q) in &lines {
            for &(e, r) in &circles {
                let p0 = n.scale(q);
                let t = Point2::new(-n.y, n.x);
                // |p0 + tau t - e|^2 = r^2
                let w = p0.sub(e);
                let b = w.dot(t);
                let disc = b * b - (w.dot(w) - r * r);
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    for tau in [-b - s, -b + s] {
                        out.push(p0.add(t.scale(tau)).angle());
                    }
                }
            }
        }
        // circle-circle via the radical line
        for i in 0..circles.len() {
            for j in i + 1..circles.len() {
                let (e1, r1) = circles[i];
                let (e2, r2) = circles[j];
                let d = e2.sub(e1);
                let dd = d.dot(d);
                if dd < 1e-28 {
                    continue;
                }
                let q = 0.5 * (dd + r1 * r1 - r2 * r2) / dd.sqrt();
                let n = d.scale(1.0 / dd.sqrt());
                let p0 = e1.add(n.scale(q));
                let t = Point2::new(-n.y, n.x);
                let h2 = r1 * r1 - q * q;
                if h2 >= 0.0 {
                    let h = h2.sqrt();
                    out.push(p0.add(t.scale(h)).angle());
                    out.push(p0.add(t.scale(-h)).angle());
                }
            }
        }
        // tangency angles for circles not containing the patch center
        for &(e, r) in &circles {
            let en = e.norm();
            if en > r && en > 0.0 {
                let half = (r / en).asin();
                let phi = e.angle();
                out.push(phi + half);
                out.push(phi - half);
            }
        }
    }

    /// Allowed radial intervals `(t_lo, t_hi)` with `t = -log r` ascending
    /// (outward boundary first), on the ray at angle `theta` from the patch.
    fn ray_intervals(patch: &Patch, region: &Region, theta: f64) -> Vec<(f64, f64)> {
        let mut r_up = f64::INFINITY;
        for l in &patch.limits {
            r_up = r_up.min(l.bound(theta));
        }
        if !(r_up > 0.0) {
            return vec![];
        }
        let r_deep = (-patch.deep_t).exp();
        if r_up <= r_deep * 1.0000001 {
            return vec![];
        }
        // base interval in r: [r_deep, r_up]
        let mut intervals: Vec<(f64, f64)> = vec![(r_deep, r_up)];
        // apply the region as r-interval constraints
        let apply = |intervals: &mut Vec<(f64, f64)>, keep: &dyn Fn(f64, f64) -> Vec<(f64, f64)>| {
            let mut next = Vec::new();
            for &(a, b) in intervals.iter() {
                next.extend(keep(a, b));
            }
            *intervals = next;
        };
        let dir = Point2::new(theta.cos(), theta.sin());
        match region {
            Region::All => {}
            Region::Disk { center, radius } => {
                let iv = ray_circle_interval(patch.center, dir, *center, *radius);
                apply(&mut intervals, &|a, b| clip_to(a, b, iv));
            }
            Region::Annulus { center, r_in, r_out } => {
                let outer = ray_circle_interval(patch.center, dir, *center, *r_out);
                apply(&mut intervals, &|a, b| clip_to(a, b, outer));
                let inner = ray_circle_interval(patch.center, dir, *center, *r_in);
                apply(&mut intervals, &|a, b| clip_out(a, b, inner));
            }
            Region::Outside { center, radius } => {
                let iv = ray_circle_interval(patch.center, dir, *center, *radius);
                apply(&mut intervals, &|a, b| clip_out(a, b, iv));
            }
            Region::HalfPlane { point, normal } => {
                let c0 = patch.center.sub(*point).dot(*normal);
                let dn = dir.dot(*normal);
                apply(&mut intervals, &|a, b| {
                    if dn.abs() < 1e-300 {
                        if c0 >= 0.0 {
                            vec![(a, b)]
                        } else {
                            vec![]
                        }
                    } else {
                        let thresh = -c0 / dn;
                        if dn > 0.0 {
                            // keep r >= thresh
                            let lo = a.max(thresh);
                            if lo < b {
                                vec![(lo, b)]
                            } else {
                                vec![]
                            }
                        } else {
                            let hi = b.min(thresh);
                            if a < hi {
                                vec![(a, hi)]
                            } else {
                                vec![]
                            }
                        }
                    }
                });
            }
        }
        // convert to t = -log r, ascending
        intervals
            .into_iter()
            .filter(|(a, b)| *b > *a && *b > 0.0)
            .map(|(a, b)| (-b.ln(), -a.max(1e-300).ln()))
            .collect()
    }

    /// Walk all quadrature nodes in deterministic order.
    pub fn for_each_node(
        &self,
        spec: &QuadratureSpec,
        region: &Region,
        refine: usize,
        mut f: impl FnMut(&Node) -> Result<()>,
    ) -> Result<()> {
        let refine = refine.max(1);
        let q_r = spec.radial_order();
        let (gx, gw) = gl_rule(q_r).clone();
        let (tx, tw) = gl_rule(12).clone();
        for (pi, patch) in self.patches.iter().enumerate() {
            // deep constant cell
            let deep_node = Node {
                patch: pi as u32,
                center: patch.center,
                log_r: -(patch.deep_t + 1.0),
                theta: 0.0,
                log_w: std::f64::consts::PI.ln() - 2.0 * patch.deep_t,
            };
            if region.contains(patch.center) {
                f(&deep_node)?;
            }
            for &(ta, tb) in &patch.theta_panels {
                let m = if patch.radial_symmetric { 1 } else { refine };
                for sub in 0..m {
                    let a = ta + (tb - ta) * sub as f64 / m as f64;
                    let b = ta + (tb - ta) * (sub + 1) as f64 / m as f64;
                    let (nodes, weights): (Vec<f64>, Vec<f64>) = if patch.radial_symmetric {
                        (vec![0.0], vec![std::f64::consts::TAU])
                    } else {
                        (
                            tx.iter().map(|x| 0.5 * (a + b) + 0.5 * (b - a) * x).collect(),
                            tw.iter().map(|w| 0.5 * (b - a) * w).collect(),
                        )
                    };
                    for (theta, wth) in nodes.iter().zip(weights.iter()) {
                        for (lo, hi) in Self::ray_intervals(patch, region, *theta) {
                            // radial panels from the knot grid
                            let mut edges: Vec<f64> = Vec::new();
                            edges.push(lo);
                            for &k in &patch.knots {
                                if k > lo && k < hi {
                                    edges.push(k);
                                }
                            }
                            edges.push(hi);
                            for w in edges.windows(2) {
                                let (p, q) = (w[0], w[1]);
                                let subdiv = refine;
                                for s in 0..subdiv {
                                    let pa = p + (q - p) * s as f64 / subdiv as f64;
                                    let pb = p + (q - p) * (s + 1) as f64 / subdiv as f64;
                                    let half = 0.5 * (pb - pa);
                                    let mid = 0.5 * (pa + pb);
                                    for j in 0..q_r {
                                        let t = mid + half * gx[j];
                                        let node = Node {
                                            patch: pi as u32,
                                            center: patch.center,
                                            log_r: -t,
                                            theta: *theta,
                                            log_w: -2.0 * t + (gw[j] * half * wth).ln(),
                                        };
                                        f(&node)?;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(cart) = &self.cartesian {
            let (gx2, gw2) = gl_rule(2).clone();
            for iy in 0..cart.ny {
                for ix in 0..cart.nx {
                    let cx = cart.x0 + (ix as f64 + 0.5) * cart.hx;
                    let cy = cart.y0 + (iy as f64 + 0.5) * cart.hy;
                    for jy in 0..2 {
                        for jx in 0..2 {
                            let px = cx + 0.5 * cart.hx * gx2[jx];
                            let py = cy + 0.5 * cart.hy * gy_local(gx2[jy]);
                            let p = Point2::new(px, py);
                            if !region.contains(p) {
                                continue;
                            }
                            let w = 0.25 * cart.hx * cart.hy * gw2[jx] * gw2[jy];
                            let node = Node {
                                patch: u32::MAX,
                                center: Point2::ORIGIN,
                                log_r: p.norm().max(1e-300).ln(),
                                theta: p.angle(),
                                log_w: w.ln(),
                            };
                            f(&node)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn patch_centers(&self) -> Vec<Point2> {
        self.patches.iter().map(|p| p.center).collect()
    }

    /// Exact superlevel-set measure `|{ |u| > level }|` (log), found by
    /// root-bracketing along each radial line.
    pub fn superlevel_log_measure(
        &self,
        field: &Field,
        spec: &QuadratureSpec,
        region: &Region,
        level: f64,
    ) -> Result<f64> {
        let mut acc = LogSum::new();
        let (tx, tw) = gl_rule(8).clone();
        for patch in &self.patches {
            // deep cell
            if region.contains(patch.center) {
                let v = field
                    .eval_at_offset(patch.center, LogOffset::new(-(patch.deep_t + 1.0), 0.0))?
                    .abs();
                if v > level {
                    acc.add(std::f64::consts::PI.ln() - 2.0 * patch.deep_t);
                }
            }
            for &(ta, tb) in &patch.theta_panels {
                let (nodes, weights): (Vec<f64>, Vec<f64>) = if patch.radial_symmetric {
                    (vec![0.0], vec![std::f64::consts::TAU])
                } else {
                    (
                        tx.iter().map(|x| 0.5 * (ta + tb) + 0.5 * (tb - ta) * x).collect(),
                        tw.iter().map(|w| 0.5 * (tb - ta) * w).collect(),
                    )
                };
                for (theta, wth) in nodes.iter().zip(weights.iter()) {
                    for (lo, hi) in Self::ray_intervals(patch, region, *theta) {
                        let mut edges: Vec<f64> = vec![lo];
                        for &k in &patch.knots {
                            if k > lo && k < hi {
                                edges.push(k);
                            }
                        }
                        edges.push(hi);
                        // refine each panel into a few probe segments and
                        // bracket the |u| = level crossings
                        let val = |t: f64| -> Result<f64> {
                            Ok(field
                                .eval_at_offset(patch.center, LogOffset::new(-t, *theta))?
                                .abs()
                                - level)
                        };
                        let mut marks: Vec<f64> = Vec::new();
                        for w in edges.windows(2) {
                            let probes = 4;
                            for j in 0..=probes {
                                marks.push(w[0] + (w[1] - w[0]) * j as f64 / probes as f64);
                            }
                        }
                        marks.dedup();
                        let mut pieces: Vec<(f64, f64)> = Vec::new();
                        let mut prev_t = marks[0];
                        let mut prev_v = val(prev_t)?;
                        let mut open: Option<f64> = if prev_v > 0.0 { Some(prev_t) } else { None };
                        for &t in marks.iter().skip(1) {
                            let v = val(t)?;
                            if (v > 0.0) != (prev_v > 0.0) {
                                // bisect the crossing
                                let (mut a, mut b) = (prev_t, t);
                                for _ in 0..60 {
                                    let m = 0.5 * (a + b);
                                    let vm = val(m)?;
                                    if (vm > 0.0) == (prev_v > 0.0) {
                                        a = m;
                                    } else {
                                        b = m;
                                    }
                                }
                                let cross = 0.5 * (a + b);
                                if let Some(s) = open.take() {
                                    pieces.push((s, cross));
                                } else {
                                    open = Some(cross);
                                }
                            }
                            prev_t = t;
                            prev_v = v;
                        }
                        if let Some(s) = open {
                            pieces.push((s, prev_t));
                        }
                        for (a, b) in pieces {
                            if b <= a {
                                continue;
                            }
                            // measure of the radial band: int_a^b e^{-2t} dt (per unit angle)
                            let log_m = -2.0 * a + (-((-2.0 * (b - a)).exp() - 1.0)).ln()
                                - 2.0f64.ln();
                            acc.add(log_m + wth.ln());
                        }
                    }
                }
            }
        }
        if let Some(cart) = &self.cartesian {
            for iy in 0..cart.ny {
                for ix in 0..cart.nx {
                    let cx = cart.x0 + (ix as f64 + 0.5) * cart.hx;
                    let cy = cart.y0 + (iy as f64 + 0.5) * cart.hy;
                    let p = Point2::new(cx, cy);
                    if !region.contains(p) {
                        continue;
                    }
                    if field.evaluate(p)?.abs() > level {
                        acc.add((cart.hx * cart.hy).ln());
                    }
                }
            }
        }
        Ok(acc.log_total())
    }
}

fn gy_local(x: f64) -> f64 {
    x
}

/// `r`-interval where the ray `origin + r dir` meets the disk `|x - c| <= radius`.
fn ray_circle_interval(origin: Point2, dir: Point2, c: Point2, radius: f64) -> Option<(f64, f64)> {
    let w = origin.sub(c);
    let b = w.dot(dir);
    let disc = b * b - (w.dot(w) - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-b - s, -b + s))
}

fn clip_to(a: f64, b: f64, iv: Option<(f64, f64)>) -> Vec<(f64, f64)> {
    match iv {
        None => vec![],
        Some((lo, hi)) => {
            let l = a.max(lo);
            let h = b.min(hi);
            if l < h {
                vec![(l, h)]
            } else {
                vec![]
            }
        }
    }
}

fn clip_out(a: f64, b: f64, iv: Option<(f64, f64)>) -> Vec<(f64, f64)> {
    match iv {
        None => vec![(a, b)],
        Some((lo, hi)) => {
            let mut out = Vec::new();
            if a < lo.min(b) {
                out.push((a, lo.min(b)));
            }
            if hi.max(a) < b {
                out.push((hi.max(a), b));
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Sampled cell fields

/// One sampled cell: log measure weight plus the field value there.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub log_w: f64,
    pub value: f64,
    pub patch: u32,
    pub log_r: f64,
    pub theta: f64,
}

/// A field reduced to weighted samples on the multi-scale partition. The same
/// cells back the Luxemburg bisection, level-set scans and rearrangement.
#[derive(Debug, Clone)]
pub struct CellField {
    pub cells: Vec<Cell>,
    pub centers: Vec<Point2>,
}

impl CellField {
    pub fn sample(field: &Field, spec: &QuadratureSpec, region: &Region) -> Result<CellField> {
        Self::sample_refined(field, spec, region, 1)
    }

    pub fn sample_refined(
        field: &Field,
        spec: &QuadratureSpec,
        region: &Region,
        refine: usize,
    ) -> Result<CellField> {
        let part = Partition::build(field, spec, region)?;
        let mut cells = Vec::new();
        part.for_each_node(spec, region, refine, |node| {
            let v = field.eval_at_offset(node.center, node.offset())?;
            cells.push(Cell {
                log_w: node.log_w,
                value: v,
                patch: node.patch,
                log_r: node.log_r,
                theta: node.theta,
            });
            Ok(())
        })?;
        Ok(CellField {
            cells,
            centers: part.patch_centers(),
        })
    }

    /// log of `int g(u) dx` for a nonnegative integrand given through its log:
    /// `log_g(u) -> Some(log g(u))` or `None` for zero.
    pub fn log_integral(&self, log_g: impl Fn(f64) -> Option<f64>) -> f64 {
        let mut acc = LogSum::new();
        for c in &self.cells {
            if let Some(lg) = log_g(c.value) {
                acc.add(lg + c.log_w);
            }
        }
        acc.log_total()
    }

    /// Signed integral computed fully in log space.
    pub fn integral_logw(&self, g: impl Fn(f64) -> f64) -> Result<f64> {
        let mut acc = SignedLogSum::new();
        for c in &self.cells {
            let gv = g(c.value);
            if gv == 0.0 || !gv.is_finite() {
                continue;
            }
            acc.add(gv.abs().ln() + c.log_w, gv < 0.0);
        }
        acc.total()
    }

    /// Total measure of the sampled region (log).
    pub fn log_area(&self) -> f64 {
        let mut acc = LogSum::new();
        for c in &self.cells {
            acc.add(c.log_w);
        }
        acc.log_total()
    }

    pub fn sup_abs(&self) -> f64 {
        self.cells.iter().fold(0.0f64, |m, c| m.max(c.value.abs()))
    }
}

/// Gradient samples: log of `|grad u|^2` plus position data.
#[derive(Debug, Clone, Copy)]
pub struct GradCell {
    pub log_w: f64,
    pub log_gsq: f64,
    pub patch: u32,
    pub log_r: f64,
    pub theta: f64,
    pub center: Point2,
}

pub fn sample_grad_cells(
    field: &Field,
    spec: &QuadratureSpec,
    region: &Region,
) -> Result<Vec<GradCell>> {
    let part = Partition::build(field, spec, region)?;
    let mut cells = Vec::new();
    part.for_each_node(spec, region, 1, |node| {
        let g = field.gradient_at_offset(node.center, node.offset())?;
        let ln = g.log_norm();
        cells.push(GradCell {
            log_w: node.log_w,
            log_gsq: if ln == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                2.0 * ln
            },
            patch: node.patch,
            log_r: node.log_r,
            theta: node.theta,
            center: node.center,
        });
        Ok(())
    })?;
    Ok(cells)
}

/// `int |grad u|^2 dx` over the region.
pub fn dirichlet_energy_raw(field: &Field, spec: &QuadratureSpec, region: &Region) -> Result<f64> {
    let part = Partition::build(field, spec, region)?;
    let mut acc = LogSum::new();
    part.for_each_node(spec, region, 1, |node| {
        let g = field.gradient_at_offset(node.center, node.offset())?;
        let ln = g.log_norm();
        if ln != f64::NEG_INFINITY {
            acc.add(2.0 * ln + node.log_w);
        }
        Ok(())
    })?;
    let l = acc.log_total();
    if l > 709.0 {
        return Err(CcxError::OverflowDominant);
    }
    Ok(acc.total())
}

/// `<grad u, grad v>` over the plane, sampled on the union partition.
pub fn gradient_inner_product(
    a: &Field,
    b: &Field,
    spec: &QuadratureSpec,
) -> Result<f64> {
    let mut merged = a.clone();
    for p in &b.parts {
        merged.parts.push(p.clone());
    }
    merged.support_radius = a.support_radius.max(b.support_radius);
    let part = Partition::build(&merged, spec, &Region::All)?;
    let mut acc = SignedLogSum::new();
    part.for_each_node(spec, &Region::All, 1, |node| {
        let ga = a.gradient_at_offset(node.center, node.offset())?;
        let gb = b.gradient_at_offset(node.center, node.offset())?;
        let la = ga.log_norm();
        let lb = gb.log_norm();
        if la == f64::NEG_INFINITY || lb == f64::NEG_INFINITY {
            return Ok(());
        }
        let ca = cos_of(ga);
        let cb = cos_of(gb);
        let dot = ca.dot(cb);
        if dot == 0.0 {
            return Ok(());
        }
        acc.add(la + lb + dot.abs().ln() + node.log_w, dot < 0.0);
        Ok(())
    })?;
    acc.total()
}

fn cos_of(g: LogGrad) -> Point2 {
    let n = g.dir.norm();
    if n == 0.0 {
        Point2::ORIGIN
    } else {
        g.dir.scale(1.0 / n)
    }
}

/// Generic multi-field pointwise integral on the union partition:
/// `int F(u_1(x), ..., u_k(x)) dx`.
pub fn integrate_multi(
    fields: &[&Field],
    spec: &QuadratureSpec,
    region: &Region,
    f: impl Fn(&[f64]) -> f64,
) -> Result<f64> {
    if fields.is_empty() {
        return Ok(0.0);
    }
    let mut merged = fields[0].clone();
    for other in &fields[1..] {
        for p in &other.parts {
            merged.parts.push(p.clone());
        }
        merged.support_radius = merged.support_radius.max(other.support_radius);
        if merged.background.is_none() {
            merged.background = other.background.clone();
        }
    }
    let part = Partition::build(&merged, spec, region)?;
    let mut acc = SignedLogSum::new();
    let mut vals = vec![0.0; fields.len()];
    part.for_each_node(spec, region, 1, |node| {
        for (i, fld) in fields.iter().enumerate() {
            vals[i] = fld.eval_at_offset(node.center, node.offset())?;
        }
        let fv = f(&vals);
        if fv != 0.0 && fv.is_finite() {
            acc.add(fv.abs().ln() + node.log_w, fv < 0.0);
        }
        Ok(())
    })?;
    acc.total()
}

/// Superlevel-set measure `|{ |u| > level }|` with exact radial crossings.
pub fn superlevel_measure(
    field: &Field,
    spec: &QuadratureSpec,
    region: &Region,
    level: f64,
) -> Result<f64> {
    let l = superlevel_log_measure(field, spec, region, level)?;
    Ok(if l == f64::NEG_INFINITY { 0.0 } else { l.exp() })
}

pub fn superlevel_log_measure(
    field: &Field,
    spec: &QuadratureSpec,
    region: &Region,
    level: f64,
) -> Result<f64> {
    let part = Partition::build(field, spec, region)?;
    part.superlevel_log_measure(field, spec, region, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Background, Field, Triplet, TWO_PI};
    use crate::profile::moser_profile;

    fn moser_field(alpha: f64) -> Field {
        Field::single(Triplet::new(alpha, Point2::ORIGIN, moser_profile()).unwrap())
    }

    #[test]
    fn partition_area_exact() {
        // union of three cores: total area of the tiling equals pi R^2
        let f = moser_field(8.0)
            .with_part(1.0, Triplet::new(30.0, Point2::new(0.4, 0.1), moser_profile()).unwrap())
            .with_part(0.5, Triplet::new(3.0, Point2::new(-0.3, 0.2), moser_profile()).unwrap());
        let spec = QuadratureSpec::default();
        let cf = CellField::sample(&f, &spec, &Region::All).unwrap();
        let area = cf.log_area().exp();
        let expect = std::f64::consts::PI * f.support_radius * f.support_radius;
        assert!(
            (area - expect).abs() / expect < 1e-9,
            "area {area} vs {expect}"
        );
    }

    #[test]
    fn partition_area_restricted() {
        let f = moser_field(20.0)
            .with_part(1.0, Triplet::new(5.0, Point2::new(0.25, -0.15), moser_profile()).unwrap());
        let spec = QuadratureSpec::default();
        let r = 0.8;
        let cf = CellField::sample(&f, &spec, &Region::Disk { center: Point2::ORIGIN, radius: r })
            .unwrap();
        let area = cf.log_area().exp();
        let expect = std::f64::consts::PI * r * r;
        assert!(
            (area - expect).abs() / expect < 1e-9,
            "area {area} vs {expect}"
        );
    }

    #[test]
    fn disk_indicator_l2() {
        // int u^2 over a disk indicator: pi R^2 c^2 to 1e-10 relative
        let f = Field {
            parts: vec![],
            background: Some(Background::Disk {
                center: Point2::ORIGIN,
                radius: 0.7,
                value: 2.5,
            }),
            cutoff: None,
            support_radius: 1.0,
        };
        let spec = QuadratureSpec::default();
        let cf = CellField::sample(&f, &spec, &Region::All).unwrap();
        let v = cf.integral_logw(|u| u * u).unwrap();
        let expect = std::f64::consts::PI * 0.49 * 6.25;
        assert!((v - expect).abs() / expect < 1e-10, "{v} vs {expect}");
    }

    #[test]
    fn moser_energy_is_one() {
        let spec = QuadratureSpec::default();
        for alpha in [5.0, 50.0, 200.0] {
            let f = moser_field(alpha);
            let e = dirichlet_energy_raw(&f, &spec, &Region::All).unwrap();
            assert!(
                (e - 1.0).abs() < 1e-8,
                "alpha {alpha}: energy {e}"
            );
        }
    }

    #[test]
    fn concentration_l2_against_1d_oracle() {
        // int u^2 = alpha^2 int psi^2 e^{-2 alpha y} dy
        let alpha = 17.0;
        let t = Triplet::new(alpha, Point2::new(0.2, -0.4), moser_profile()).unwrap();
        let oracle = alpha * alpha * t.profile.weighted_l2(alpha);
        let f = Field::single(t);
        let spec = QuadratureSpec::default();
        let cf = CellField::sample(&f, &spec, &Region::All).unwrap();
        let v = cf.integral_logw(|u| u * u).unwrap();
        assert!(
            (v - oracle).abs() / oracle < 1e-8,
            "quad {v} vs oracle {oracle}"
        );
    }

    #[test]
    fn superlevel_moser() {
        // level set of f_alpha at tau * height is the ball of radius e^{-tau alpha}
        let alpha = 30.0;
        let f = moser_field(alpha);
        let spec = QuadratureSpec::default();
        let h = (alpha / TWO_PI).sqrt();
        for tau in [0.3, 0.6, 0.9] {
            let m = superlevel_measure(&f, &spec, &Region::All, tau * h).unwrap();
            let expect = std::f64::consts::PI * (-2.0 * tau * alpha).exp();
            assert!(
                (m - expect).abs() / expect < 1e-6,
                "tau {tau}: {m} vs {expect}"
            );
        }
        // above the sup: zero
        let m = superlevel_measure(&f, &spec, &Region::All, 1.1 * h).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn gradient_cross_same_bubble() {
        let f = moser_field(12.0);
        let spec = QuadratureSpec::default();
        let c = gradient_inner_product(&f, &f, &spec).unwrap();
        assert!((c - 1.0).abs() < 1e-7, "self cross {c}");
    }
}
