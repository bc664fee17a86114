//! Example generators: the piecewise-log family, its anisotropic, matrix and
//! diffeomorphic transforms, same-scale pairs, two-scale sums, translated
//! bumps and the flattening family, plus the odd cutoff applied to fields.

use crate::error::CcxError;
use crate::field::{Background, Field, FieldPart, Transform, Triplet, TWO_PI};
use crate::geom::Point2;
use crate::profile::{moser_profile, translate_profile, Profile};
use crate::Result;

/// `f_alpha`: the radial piecewise-log concentration at the origin.
pub fn gen_moser(alpha: f64) -> Result<Field> {
    Ok(Field::single(Triplet::new(
        alpha,
        Point2::ORIGIN,
        moser_profile(),
    )?))
}

/// `f_alpha(lambda_1 x_1, lambda_2 x_2)`.
pub fn gen_anisotropic(alpha: f64, lambda1: f64, lambda2: f64) -> Result<Field> {
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(CcxError::DomainError("lambda_i must be positive".into()));
    }
    let t = Transform::Linear {
        m: [[lambda1, 0.0], [0.0, lambda2]],
    };
    t.validate()?;
    Ok(Field {
        parts: vec![FieldPart {
            amp: 1.0,
            triplet: Triplet::new(alpha, Point2::ORIGIN, moser_profile())?,
            transform: Some(t),
        }],
        background: None,
        cutoff: None,
        support_radius: (1.0 / lambda1).max(1.0 / lambda2) + 1e-9,
    })
}

/// Concentration with profile `psi` composed with a plane diffeomorphism.
pub fn gen_diffeo(alpha: f64, psi: &Profile, map: Transform) -> Result<Field> {
    map.validate()?;
    // support radius: grow a circle until its pullback leaves the unit disk
    let mut r = 1.0;
    'grow: for _ in 0..60 {
        for k in 0..64 {
            let th = TWO_PI * k as f64 / 64.0;
            let p = Point2::new(r * th.cos(), r * th.sin());
            if map.pullback(p)?.norm() < 1.0 {
                r *= 1.3;
                continue 'grow;
            }
        }
        break;
    }
    Ok(Field {
        parts: vec![FieldPart {
            amp: 1.0,
            triplet: Triplet::new(alpha, Point2::ORIGIN, psi.clone())?,
            transform: Some(map),
        }],
        background: None,
        cutoff: None,
        support_radius: r,
    })
}

/// Operator 2-norm of a 2x2 matrix.
pub fn operator_norm(m: [[f64; 2]; 2]) -> f64 {
    // largest singular value via the closed form on M^T M
    let a = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let b = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let d = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let tr = a + d;
    let det = a * d - b * b;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    (0.5 * tr + disc).max(0.0).sqrt()
}

pub fn det2(m: [[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// The three finite checks on the matrix family at a given `alpha`:
/// growth `alpha |det A|`, the norm-determinant ratio `|A|^2 / |det A|`
/// (compared against 10), and the shift `a = log |det A|^{1/2} / alpha`
/// (required nonnegative).
pub fn matrix_conditions(alpha: f64, m: [[f64; 2]; 2]) -> (f64, f64, f64) {
    let det = det2(m).abs();
    let n = operator_norm(m);
    (alpha * det, n * n / det, 0.5 * det.ln() / alpha)
}

/// `f_alpha(A x)` with the admissibility checks.
pub fn gen_matrix(alpha: f64, m: [[f64; 2]; 2]) -> Result<Field> {
    let det = det2(m);
    if det == 0.0 || !det.is_finite() {
        return Err(CcxError::InvalidTransform(format!("det = {det}")));
    }
    let (growth, ratio, shift) = matrix_conditions(alpha, m);
    if growth < 10.0 {
        return Err(CcxError::MatrixConditionViolated(
            "matrix1",
            format!("alpha |det A| = {growth:.3e} < 10"),
        ));
    }
    if ratio > 10.0 {
        return Err(CcxError::MatrixConditionViolated(
            "matrix2",
            format!("|A|^2 / |det A| = {ratio:.3e} > 10"),
        ));
    }
    if shift < 0.0 {
        return Err(CcxError::MatrixConditionViolated(
            "matrix3",
            format!("log |det A|^(1/2) / alpha = {shift:.3e} < 0"),
        ));
    }
    let t = Transform::Linear { m };
    let inv_norm = operator_norm([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]);
    Ok(Field {
        parts: vec![FieldPart {
            amp: 1.0,
            triplet: Triplet::new(alpha, Point2::ORIGIN, moser_profile())?,
            transform: Some(t),
        }],
        background: None,
        cutoff: None,
        support_radius: inv_norm + 1e-9,
    })
}

/// Two concentrations of the same scale with cores `e^{-alpha}/2` apart; the
/// second carries the unit-translated profile, so the values stack to
/// `2 sqrt(alpha/2pi)` on the deep ball.
pub fn gen_same_scale_pair(alpha: f64) -> Result<Field> {
    let l = moser_profile();
    let l1 = translate_profile(&l, 1.0)?;
    let xn = Point2::new(0.5 * (-alpha).exp(), 0.0);
    Ok(Field::single(Triplet::new(alpha, Point2::ORIGIN, l)?).with_part(
        1.0,
        Triplet::new(alpha, xn, l1)?,
    ))
}

/// `a f_alpha(x - core) + b f_beta(x)`.
pub fn gen_two_scale_sum(a: f64, b: f64, alpha: f64, beta: f64, core: Point2) -> Result<Field> {
    let f = Field::from_parts(
        vec![
            FieldPart {
                amp: a,
                triplet: Triplet::new(alpha, core, moser_profile())?,
                transform: None,
            },
            FieldPart {
                amp: b,
                triplet: Triplet::new(beta, Point2::ORIGIN, moser_profile())?,
                transform: None,
            },
        ],
        core.norm() + 1.0 + 1e-9,
    );
    Ok(f)
}

/// A fixed concentration translated far from the origin: mass escapes every
/// ball, the compactness-at-infinity hypothesis fails.
pub fn gen_translate_away(psi: &Profile, alpha: f64, shift: Point2) -> Result<Field> {
    Ok(Field::single(Triplet::new(alpha, shift, psi.clone())?))
}

/// The flattening family `(1/n) e^{-|x/n|^2}`: gradients vanish while the
/// L2 mass stays put.
pub fn gen_flattening(n: f64) -> Result<Field> {
    if !(n > 0.0) {
        return Err(CcxError::DomainError(format!("n = {n}")));
    }
    Ok(Field {
        parts: vec![],
        background: Some(Background::GaussianFlattening { n }),
        cutoff: None,
        support_radius: 7.0 * n,
    })
}

/// Smooth compactly supported bump, the translation-escape example base.
pub fn gen_bump(center: Point2, radius: f64, height: f64) -> Field {
    Field {
        parts: vec![],
        background: Some(Background::CosineBump {
            center,
            radius,
            height,
        }),
        cutoff: None,
        support_radius: center.norm() + radius + 1e-9,
    }
}

/// Lazy cutoff field `x -> sqrt(alpha/2pi) Theta_a^M(sqrt(2pi/alpha) u(x))`.
pub fn apply_cutoff(field: &Field, alpha: f64, a: f64, m: f64) -> Result<Field> {
    field.clone().with_cutoff(alpha, a, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orlicz::{dirichlet_energy, orlicz_norm, OrliczConfig};
    use crate::quad::QuadratureSpec;

    #[test]
    fn matrix_diag_shift_exact() {
        // A = diag(d, d) with d = e^{a alpha}: condition 3 returns a exactly
        let alpha = 40.0;
        let a = 0.05f64;
        let d = (a * alpha).exp();
        let (_, _, shift) = matrix_conditions(alpha, [[d, 0.0], [0.0, d]]);
        assert!((shift - a).abs() < 1e-14);
    }

    #[test]
    fn inverse_norm_identity() {
        // |A^{-1}| = |A| / |det A| for invertible 2x2
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed as f64 / u64::MAX as f64) * 4.0 - 2.0
        };
        for _ in 0..50 {
            let m = [[next(), next()], [next(), next()]];
            let det = det2(m);
            if det.abs() < 1e-3 {
                continue;
            }
            let inv = [
                [m[1][1] / det, -m[0][1] / det],
                [-m[1][0] / det, m[0][0] / det],
            ];
            let lhs = operator_norm(inv);
            let rhs = operator_norm(m) / det.abs();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * rhs.max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn same_scale_pair_stacked_plateau() {
        let alpha = 40.0;
        let f = gen_same_scale_pair(alpha).unwrap();
        let xn = Point2::new(0.5 * (-alpha).exp(), 0.0);
        // point within e^{-2 alpha} of the second core
        let v = f
            .eval_at_offset(xn, crate::geom::LogOffset::new(-2.0 * alpha - 1.0, 0.4))
            .unwrap();
        let expect = 2.0 * (alpha / TWO_PI).sqrt();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn matrix_condition_errors() {
        // near-singular: growth check fails
        assert!(matches!(
            gen_matrix(5.0, [[0.1, 0.0], [0.0, 0.1]]),
            Err(CcxError::MatrixConditionViolated("matrix1", _))
        ));
        // extreme anisotropy: norm-determinant ratio fails
        assert!(matches!(
            gen_matrix(40.0, [[100.0, 0.0], [0.0, 0.01]]),
            Err(CcxError::MatrixConditionViolated("matrix2", _))
        ));
        // shrinking determinant: negative shift
        assert!(matches!(
            gen_matrix(40.0, [[0.5, 0.0], [0.0, 0.5]]),
            Err(CcxError::MatrixConditionViolated("matrix3", _))
        ));
    }

    #[test]
    fn cutoff_identity_region() {
        // on values within [a, M] in profile units the cutoff is the identity
        let alpha = 30.0;
        let f = gen_moser(alpha).unwrap();
        let cut = apply_cutoff(&f, alpha, 0.05, 10.0).unwrap();
        let p = Point2::new((-0.7 * alpha).exp(), 0.0); // profile value 0.7
        assert_eq!(f.evaluate(p).unwrap(), cut.evaluate(p).unwrap());
        // zero field stays zero
        let z = apply_cutoff(&Field::zero(), 10.0, 0.05, 10.0).unwrap();
        assert_eq!(z.evaluate(Point2::new(0.1, 0.1)).unwrap(), 0.0);
    }

    #[test]
    fn anisotropic_difference_shrinks() {
        // |gen_anisotropic(alpha, 2, 0.5) - f_alpha| in the Luxemburg norm
        // decreases like sqrt(log 2 / alpha). The converged values are
        // 0.1061 / 0.0750 / 0.0531 at alpha = 10 / 20 / 40 (stable across
        // three quadrature resolutions).
        let spec = QuadratureSpec::default();
        let cfg = OrliczConfig::default();
        let mut prev = f64::INFINITY;
        for (alpha, frozen) in [(10.0, 0.10614), (20.0, 0.07505), (40.0, 0.05307)] {
            let mut diff = gen_anisotropic(alpha, 2.0, 0.5).unwrap();
            let f = gen_moser(alpha).unwrap();
            diff.parts.push(FieldPart {
                amp: -1.0,
                triplet: f.parts[0].triplet.clone(),
                transform: None,
            });
            diff.support_radius = diff.support_radius.max(f.support_radius);
            let v = orlicz_norm(&diff, &cfg, &spec).unwrap();
            assert!(v < prev + 1e-6, "not decreasing at alpha {alpha}: {v} vs {prev}");
            assert!((v - frozen).abs() < 5e-4, "alpha {alpha}: {v} vs frozen {frozen}");
            prev = v;
        }
    }

    #[test]
    fn matrix_family_matches_translated_profile() {
        // diag(e^{a alpha}) acts on the profile as a translation by a
        let alpha = 40.0;
        let a = 0.5f64;
        let d = (a * alpha).exp();
        let mut diff = gen_matrix(alpha, [[d, 0.0], [0.0, d]]).unwrap();
        let shifted = Triplet::new(
            alpha,
            Point2::ORIGIN,
            translate_profile(&moser_profile(), a).unwrap(),
        )
        .unwrap();
        diff.parts.push(FieldPart {
            amp: -1.0,
            triplet: shifted,
            transform: None,
        });
        let spec = QuadratureSpec::default();
        let cfg = OrliczConfig::default();
        let v = orlicz_norm(&diff, &cfg, &spec).unwrap();
        assert!(v <= 0.05, "matrix-family difference norm {v}");
    }

    #[test]
    fn translation_invariance_of_energy_not_ratio() {
        let spec = QuadratureSpec::default();
        let l = moser_profile();
        let la = translate_profile(&l, 2.0).unwrap();
        let f = Field::single(Triplet::new(25.0, Point2::ORIGIN, l.clone()).unwrap());
        let g = Field::single(Triplet::new(25.0, Point2::ORIGIN, la.clone()).unwrap());
        let ef = dirichlet_energy(&f, &spec).unwrap();
        let eg = dirichlet_energy(&g, &spec).unwrap();
        assert!((ef - eg).abs() < 1e-10);
        let (rf, _) = l.sup_ratio().unwrap();
        let (rg, _) = la.sup_ratio().unwrap();
        assert!(rg < rf);
    }
}
