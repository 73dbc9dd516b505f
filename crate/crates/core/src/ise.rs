//! Mean mass densities of integrated super-Brownian excursion.
//!
//! * `two_point_hat(k)  = ∫₀^∞ t e^{−t²/2} e^{−k²t/2} dt`
//! * `two_point_x(x, d) = ∫₀^∞ t e^{−t²/2} (2πt)^{−d/2} e^{−|x|²/2t} dt`
//! * `three_point_hat(k, l) = ∫∫∫ S e^{−S²/2} e^{−[|k+l|²t₁ + |k|²t₂ + |l|²t₃]/2}`,
//!   `S = t₁ + t₂ + t₃`, with the branch point left free.

use std::f64::consts::PI;

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_to_infinity, IseEvalConfig};

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("wave vector must be finite".into()))
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Fourier transform of the ISE two-point density, by quadrature.
pub fn two_point_hat(k: f64, cfg: &IseEvalConfig) -> Result<f64> {
    check_finite(&[k])?;
    let c = 0.5 * k * k;
    integrate_to_infinity(|t| t * (-0.5 * t * t - c * t).exp(), 0.0, cfg).map(|q| q.value)
}

/// Closed form of [`two_point_hat`]: with `c = k²/2`,
/// `1 − c e^{c²/2} √(π/2) erfc(c/√2)`.
pub fn two_point_hat_closed_form(k: f64) -> f64 {
    let c = 0.5 * k * k;
    let x = c / std::f64::consts::SQRT_2;
    if x < 20.0 {
        1.0 - c * (0.5 * c * c).exp() * (PI / 2.0).sqrt() * erfc(x)
    } else {
        // asymptotic series of e^{x²} erfc(x)
        let inv = 1.0 / (c * c);
        inv * (1.0 - 3.0 * inv + 15.0 * inv * inv - 105.0 * inv * inv * inv)
    }
}

/// ISE two-point density in position space for `x ∈ R^d`.
///
/// The substitution `t = s²` regularises the `t → 0` end, where the
/// integrand behaves like `t^{1−d/2}` at `x = 0`; that integral diverges for
/// `d ≥ 4`, so `x = 0` is rejected for `d ≥ 2`.
pub fn two_point_x(x: &[f64], cfg: &IseEvalConfig) -> Result<f64> {
    check_finite(x)?;
    let d = x.len();
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let r2 = norm2(x);
    if d >= 2 && r2 == 0.0 {
        return Err(Error::InvalidArgument("x = 0 is singular for d >= 2".into()));
    }
    let norm = (2.0 * PI).powf(-(d as f64) / 2.0);
    let half_d = d as f64;
    // dt = 2s ds and t (2πt)^{-d/2} = (2π)^{-d/2} s^{2-d}
    let f = |s: f64| {
        if s == 0.0 {
            return 0.0;
        }
        let t = s * s;
        let log = (3.0 - half_d) * s.ln() - 0.5 * t * t - r2 / (2.0 * t);
        2.0 * norm * log.exp()
    };
    // split near the peak of the integrand so the first panels see it
    let peak = r2.sqrt().max(1.0);
    let a = integrate(f, 0.0, peak, cfg)?;
    let b = integrate_to_infinity(f, peak, cfg)?;
    Ok(a.value + b.value)
}

/// `(e^x − 1)/x`, stable near zero.
fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

/// `∫₀^w e^{−(b t + c (w − t))/2} dt`, symmetric in `(b, c)`.
fn edge_integral(b: f64, c: f64, w: f64) -> f64 {
    let lo = b.min(c);
    let gap = (b - c).abs();
    w * (-0.5 * lo * w).exp() * phi1(-0.5 * gap * w)
}

/// Fourier transform of the ISE three-point density.
///
/// The `t₁, t₂, t₃` integral is rewritten with `s = t₁ + t₂ + t₃`; the
/// innermost simplex coordinate is integrated in closed form, leaving an
/// adaptive quadrature in `t₁ ∈ [0, s]` nested in one over `s ∈ [0, ∞)`.
pub fn three_point_hat(k: &[f64], l: &[f64], cfg: &IseEvalConfig) -> Result<f64> {
    check_finite(k)?;
    check_finite(l)?;
    if k.len() != l.len() {
        return Err(Error::DimensionMismatch {
            expected: k.len(),
            found: l.len(),
        });
    }
    let kl: Vec<f64> = k.iter().zip(l).map(|(a, b)| a + b).collect();
    three_point_hat_from_squares(norm2(&kl), norm2(k), norm2(l), cfg)
}

/// [`three_point_hat`] in terms of `(|k+l|², |k|², |l|²)`.
pub fn three_point_hat_from_squares(a: f64, b: f64, c: f64, cfg: &IseEvalConfig) -> Result<f64> {
    if [a, b, c].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "squared norms must be finite and non-negative".into(),
        ));
    }
    let inner_cfg = cfg.tighter(1e-2);
    let mut failure = None;
    let outer = integrate_to_infinity(
        |s| {
            if s == 0.0 || failure.is_some() {
                return 0.0;
            }
            let section = integrate(
                |t1| (-0.5 * a * t1).exp() * edge_integral(b, c, s - t1),
                0.0,
                s,
                &inner_cfg,
            );
            match section {
                Ok(q) => s * (-0.5 * s * s).exp() * q.value,
                Err(e) => {
                    failure = Some(e);
                    0.0
                }
            }
        },
        0.0,
        cfg,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(outer.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> IseEvalConfig {
        IseEvalConfig::default()
    }

    #[test]
    fn two_point_normalised() {
        assert!((two_point_hat(0.0, &cfg()).unwrap() - 1.0).abs() < 1e-12);
        assert!((two_point_hat_closed_form(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_point_quadrature_matches_closed_form() {
        for i in 0..=16 {
            let k = 0.25 * i as f64;
            let q = two_point_hat(k, &cfg()).unwrap();
            let c = two_point_hat_closed_form(k);
            assert!((q - c).abs() < 1e-10, "k={k}: {q} vs {c}");
        }
    }

    #[test]
    fn two_point_decreasing_to_zero() {
        let mut prev = 1.0 + 1e-15;
        for i in 0..60 {
            let k = 0.2 * i as f64;
            let v = two_point_hat(k, &cfg()).unwrap();
            assert!(v > 0.0 && v <= 1.0 + 1e-12);
            assert!(v < prev);
            prev = v;
        }
        assert!(two_point_hat(100.0, &cfg()).unwrap() < 1e-6);
        // closed form stays consistent across the switch to the asymptotic series
        let k = (2.0 * 20.0 * std::f64::consts::SQRT_2).sqrt();
        let below = two_point_hat_closed_form(k * (1.0 - 1e-9));
        let above = two_point_hat_closed_form(k * (1.0 + 1e-9));
        assert!((below - above).abs() / below < 1e-7);
    }

    #[test]
    fn two_point_x_is_radial() {
        let a = two_point_x(&[0.7, 0.0, 0.0], &cfg()).unwrap();
        let b = two_point_x(&[0.0, 0.7, 0.0], &cfg()).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
        assert!(two_point_x(&[0.0, 0.0], &cfg()).is_err());
        assert!(two_point_x(&[0.0], &cfg()).unwrap() > 0.0);
    }

    #[test]
    fn two_point_x_normalised_in_three_dimensions() {
        let c = cfg();
        let q = crate::quadrature::integrate_to_infinity(
            |r| {
                if r == 0.0 {
                    0.0
                } else {
                    4.0 * PI * r * r * two_point_x(&[r, 0.0, 0.0], &c).unwrap()
                }
            },
            0.0,
            &c,
        )
        .unwrap();
        assert!((q.value - 1.0).abs() < 1e-8, "{}", q.value);
    }

    #[test]
    fn two_point_x_fourier_in_one_dimension() {
        let c = cfg();
        for &k in &[0.5, 1.0, 2.0] {
            let q = crate::quadrature::integrate_to_infinity(
                |x| 2.0 * two_point_x(&[x], &c).unwrap() * (k * x).cos(),
                0.0,
                &IseEvalConfig {
                    max_subdivisions: 5000,
                    ..c
                },
            )
            .unwrap();
            let expected = two_point_hat_closed_form(k);
            assert!((q.value - expected).abs() < 1e-6, "k={k}: {} vs {expected}", q.value);
        }
    }

    #[test]
    fn three_point_at_origin() {
        let v = three_point_hat(&[0.0, 0.0], &[0.0, 0.0], &cfg()).unwrap();
        assert!((v - 1.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn three_point_reduces_for_l_zero() {
        // independent route: integrate the simplex section in closed form
        // ∫_{t1+t2+t3=s} e^{-β(t1+t2)} = (1 - e^{-βs}(1+βs))/β², β = |k|²/2
        let c = cfg();
        for &k in &[0.5, 1.0, 2.0] {
            let beta = 0.5 * k * k;
            let oracle = crate::quadrature::integrate_to_infinity(
                |s| {
                    let sec = -(-beta * s).exp_m1() - beta * s * (-beta * s).exp();
                    s * (-0.5 * s * s).exp() * sec / (beta * beta)
                },
                0.0,
                &c,
            )
            .unwrap()
            .value;
            let v = three_point_hat(&[k], &[0.0], &c).unwrap();
            assert!((v - oracle).abs() < 1e-10, "k={k}: {v} vs {oracle}");
        }
    }

    #[test]
    fn three_point_symmetries() {
        let c = cfg();
        let k = [0.8, -0.3];
        let l = [0.2, 1.1];
        let base = three_point_hat(&k, &l, &c).unwrap();
        let swapped = three_point_hat(&l, &k, &c).unwrap();
        assert!((base - swapped).abs() < 1e-10);
        // relabel (k+l, k, l) -> (l, k+l, k) via k' = -(k+l), l' = k
        let k2 = [-(k[0] + l[0]), -(k[1] + l[1])];
        let rotated = three_point_hat(&k2, &k, &c).unwrap();
        assert!((base - rotated).abs() < 1e-10, "{base} vs {rotated}");
        assert!(base < 1.0 && base > 0.0);
    }
}
