//! The generating function `Λ_z(k) = 1 / (k² + 2^{3/2} √(1−z))` and its
//! Taylor coefficients `λₙ(k)`, computed two independent ways:
//!
//! * reciprocal-series recursion against the binomial series of `√(1−z)`;
//! * trapezoidal discretisation of the Cauchy integral on `|z| = r`.
//!
//! The trapezoidal sum returns `r^n λₙ` and so loses `n·log₂(1/r)` bits to
//! cancellation; it is evaluated in multiprecision arithmetic with the
//! working precision raised accordingly.

use astro_float::{BigFloat, Consts, RoundingMode};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ise;
use crate::quadrature::IseEvalConfig;

pub const TWO_THREE_HALVES: f64 = 2.828_427_124_746_190_1;

/// `Λ_z(k)` on the principal branch (`√(1−z) > 0` for real `z < 1`).
pub fn lambda_at(z: Complex64, k: f64) -> Result<Complex64> {
    if !(z.norm() < 1.0) {
        return Err(Error::InvalidArgument(format!("|z| = {} must be below 1", z.norm())));
    }
    let root = (Complex64::new(1.0, 0.0) - z).sqrt();
    Ok(Complex64::new(1.0, 0.0) / (k * k + TWO_THREE_HALVES * root))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesMethod {
    Recursion,
    Contour,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesCoefficients {
    pub k: f64,
    pub coeffs: Vec<f64>,
    pub method: SeriesMethod,
}

impl SeriesCoefficients {
    /// Partial sum `Σ_{n ≤ N} λₙ zⁿ`.
    pub fn partial_sum(&self, z: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }
}

/// Coefficients of `√(1−z) = Σ sₘ zᵐ`.
pub fn sqrt_one_minus_series(n_max: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(n_max + 1);
    s.push(1.0);
    for m in 1..=n_max {
        let prev = s[m - 1];
        s.push(prev * (m as f64 - 1.5) / m as f64);
    }
    s
}

/// `λ₀ … λ_N` from `λ₀ = 1/(k² + 2^{3/2})`,
/// `λₙ = −λ₀ 2^{3/2} Σ_{m=1}^{n} sₘ λ_{n−m}`, with Neumaier summation.
pub fn coefficients_by_recursion(k: f64, n_max: usize) -> SeriesCoefficients {
    let s = sqrt_one_minus_series(n_max);
    let lambda0 = 1.0 / (k * k + TWO_THREE_HALVES);
    let mut coeffs = Vec::with_capacity(n_max + 1);
    coeffs.push(lambda0);
    for n in 1..=n_max {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for m in 1..=n {
            let term = s[m] * coeffs[n - m];
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
        coeffs.push(-lambda0 * TWO_THREE_HALVES * (sum + comp));
    }
    SeriesCoefficients {
        k,
        coeffs,
        method: SeriesMethod::Recursion,
    }
}

const RM: RoundingMode = RoundingMode::ToEven;

#[derive(Clone)]
struct BigComplex {
    re: BigFloat,
    im: BigFloat,
}

fn big_to_f64(x: &BigFloat) -> f64 {
    if x.is_zero() {
        return 0.0;
    }
    x.to_string().parse().unwrap_or(f64::NAN)
}

/// `Λ(z)` in multiprecision for `z = r (cos θ, sin θ)`, `|z| < 1`.
fn lambda_big(z: &BigComplex, k2: &BigFloat, c: &BigFloat, p: usize) -> BigComplex {
    let one = BigFloat::from_u8(1, p);
    // w = 1 − z has positive real part
    let wr = one.sub(&z.re, p, RM);
    let wi = z.im.neg();
    let modulus = wr.mul(&wr, p, RM).add(&wi.mul(&wi, p, RM), p, RM).sqrt(p, RM);
    let two = BigFloat::from_u8(2, p);
    let sr = modulus.add(&wr, p, RM).div(&two, p, RM).sqrt(p, RM);
    let si = wi.div(&sr.mul(&two, p, RM), p, RM);
    // denominator k² + c √w
    let dr = k2.add(&c.mul(&sr, p, RM), p, RM);
    let di = c.mul(&si, p, RM);
    let den = dr.mul(&dr, p, RM).add(&di.mul(&di, p, RM), p, RM);
    BigComplex {
        re: dr.div(&den, p, RM),
        im: di.neg().div(&den, p, RM),
    }
}

/// `λ₀ … λ_N` from the trapezoidal rule with `points` nodes on `|z| = radius`.
///
/// The sum is evaluated on `points` and `2·points` nodes; disagreement
/// beyond `1e-12` (relative to `max(1, |λₙ|)`) means the circle is
/// under-resolved and is reported as an error. `points` must be even.
pub fn coefficients_by_contour(k: f64, n_max: usize, radius: f64, points: usize) -> Result<SeriesCoefficients> {
    if !(radius > 0.0 && radius < 1.0) {
        return Err(Error::InvalidArgument(format!("radius {radius} must lie in (0, 1)")));
    }
    if points % 2 == 1 {
        return Err(Error::InvalidArgument(format!("{points} contour points must be even")));
    }
    if points < 4 * n_max.max(1) {
        return Err(Error::InvalidArgument(format!(
            "{points} contour points are fewer than 4N = {}",
            4 * n_max.max(1)
        )));
    }
    let fine = 2 * points;
    // bits lost to r^{-n}, plus the node count, plus a safety margin
    let loss = (n_max as f64 * (1.0 / radius).log2()).ceil() as usize;
    let p = 64 * ((loss + 64 + 2 * (fine as f64).log2().ceil() as usize + 64).div_ceil(64));
    let mut cc = Consts::new().map_err(|e| Error::ContourUnresolved(format!("{e:?}")))?;

    let pi = cc.pi(p, RM);
    let r = BigFloat::from_f64(radius, p);
    let k2 = BigFloat::from_f64(k * k, p);
    let c = BigFloat::from_u8(8, p).sqrt(p, RM);

    // Coefficients are real, so Λ(z̄) is the conjugate of Λ(z) and only the
    // upper half circle is needed: with V_j = Λ(r ω^j), ω = e^{2πi/M},
    // λₙ rⁿ M = V_0 + (−1)ⁿ V_{M/2} + 2 Σ_{0<j<M/2} Re(V_j ω^{−jn}).
    let half = fine / 2;
    let step = pi
        .mul(&BigFloat::from_u8(2, p), p, RM)
        .div(&BigFloat::from_u64(fine as u64, p), p, RM);
    let (cos, sin): (Vec<BigFloat>, Vec<BigFloat>) = (0..fine)
        .map(|m| {
            let theta = step.mul(&BigFloat::from_u64(m as u64, p), p, RM);
            (theta.cos(p, RM, &mut cc), theta.sin(p, RM, &mut cc))
        })
        .unzip();
    let values: Vec<BigComplex> = (0..=half)
        .map(|m| {
            let z = BigComplex {
                re: cos[m].mul(&r, p, RM),
                im: sin[m].mul(&r, p, RM),
            };
            lambda_big(&z, &k2, &c, p)
        })
        .collect();

    let transform = |stride: usize, count: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n_max + 1);
        let mut r_pow = BigFloat::from_u8(1, p);
        let inv_count = BigFloat::from_u8(1, p).div(&BigFloat::from_u64(count as u64, p), p, RM);
        let two = BigFloat::from_u8(2, p);
        for n in 0..=n_max {
            let mut acc = BigFloat::from_u8(0, p);
            for j in 1..count / 2 {
                let idx = (stride * j * n) % fine;
                let v = &values[stride * j];
                // Re(V ω^{−jn}) = Re V cos + Im V sin
                acc = acc.add(&v.re.mul(&cos[idx], p, RM), p, RM);
                acc = acc.add(&v.im.mul(&sin[idx], p, RM), p, RM);
            }
            acc = acc.mul(&two, p, RM).add(&values[0].re, p, RM);
            let last = &values[half].re;
            acc = if n % 2 == 0 {
                acc.add(last, p, RM)
            } else {
                acc.sub(last, p, RM)
            };
            out.push(big_to_f64(&acc.mul(&inv_count.div(&r_pow, p, RM), p, RM)));
            r_pow = r_pow.mul(&r, p, RM);
        }
        out
    };
    let coarse = transform(2, points);
    let refined = transform(1, fine);

    for (n, (a, b)) in coarse.iter().zip(&refined).enumerate() {
        let scale = b.abs().max(1.0);
        if (a - b).abs() > 1e-12 * scale {
            return Err(Error::ContourUnresolved(format!(
                "λ_{n} changes by {:e} when the node count doubles",
                (a - b).abs()
            )));
        }
    }
    let coeffs = refined;
    Ok(SeriesCoefficients {
        k,
        coeffs,
        method: SeriesMethod::Contour,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnasyRow {
    pub n: usize,
    /// `√(8πn) λₙ(k n^{−1/4})`
    pub scaled: f64,
    /// `Â⁽²⁾(k)`
    pub ise: f64,
    pub gap: f64,
}

/// Compares `√(8πn) λₙ(k n^{−1/4})` with `Â⁽²⁾(k)` at `n = 16, 32, …, ≤ n_max`.
pub fn verify_cnasy(k: f64, n_max: usize) -> Result<Vec<CnasyRow>> {
    if n_max < 16 {
        return Err(Error::InvalidArgument("n_max must be at least 16".into()));
    }
    let ise = ise::two_point_hat(k, &IseEvalConfig::default())?;
    let mut rows = Vec::new();
    let mut n = 16;
    while n <= n_max {
        let kn = k * (n as f64).powf(-0.25);
        let series = coefficients_by_recursion(kn, n);
        let scaled = (8.0 * std::f64::consts::PI * n as f64).sqrt() * series.coeffs[n];
        rows.push(CnasyRow {
            n,
            scaled,
            ise,
            gap: (scaled - ise).abs(),
        });
        n *= 2;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_values() {
        let z0 = Complex64::new(0.0, 0.0);
        assert!((lambda_at(z0, 0.0).unwrap().re - 0.353_553_390_593_273_8).abs() < 1e-15);
        assert!((lambda_at(z0, 1.0).unwrap().re - 1.0 / (1.0 + TWO_THREE_HALVES)).abs() < 1e-15);
        let v = lambda_at(Complex64::new(0.75, 0.0), 0.0).unwrap();
        assert!((v.re - 0.5f64.sqrt()).abs() < 1e-15 && v.im == 0.0);
        assert!(lambda_at(Complex64::new(1.0, 0.0), 0.0).is_err());
        assert!(lambda_at(Complex64::new(0.0, -1.2), 0.0).is_err());
        // principal branch: conjugate symmetry across the real axis
        let a = lambda_at(Complex64::new(0.5, 0.3), 0.4).unwrap();
        let b = lambda_at(Complex64::new(0.5, -0.3), 0.4).unwrap();
        assert!((a - b.conj()).norm() < 1e-15);
    }

    #[test]
    fn recursion_first_terms() {
        let s = coefficients_by_recursion(0.0, 3);
        let l0 = 1.0 / TWO_THREE_HALVES;
        assert!((s.coeffs[0] - l0).abs() < 1e-16);
        // λ₁ = λ₀² 2^{3/2} / 2
        assert!((s.coeffs[1] - l0 * l0 * TWO_THREE_HALVES * 0.5).abs() < 1e-16);
        // at k = 0, Λ = 2^{-3/2} (1−z)^{-1/2}: λₙ = 2^{-3/2} C(2n,n)/4ⁿ
        let central = [1.0, 0.5, 0.375, 0.3125];
        for (n, c) in central.iter().enumerate() {
            assert!((s.coeffs[n] - l0 * c).abs() < 1e-15);
        }
    }

    #[test]
    fn partial_sums_converge() {
        let s = coefficients_by_recursion(0.0, 100);
        let z = Complex64::new(0.5, 0.0);
        let exact = lambda_at(z, 0.0).unwrap();
        assert!((s.partial_sum(z) - exact).norm() < 1e-8);
        let s = coefficients_by_recursion(1.3, 400);
        let mut prev = f64::INFINITY;
        for &zr in &[0.25, 0.5, 0.9] {
            let z = Complex64::new(zr, 0.0);
            let err = (s.partial_sum(z) - lambda_at(z, 1.3).unwrap()).norm();
            assert!(err < 1e-14 || zr == 0.9);
            let short = SeriesCoefficients {
                coeffs: s.coeffs[..50].to_vec(),
                ..s.clone()
            };
            let err50 = (short.partial_sum(z) - lambda_at(z, 1.3).unwrap()).norm();
            assert!(err <= err50);
            prev = prev.min(err);
        }
    }

    #[test]
    fn contour_recovers_constant_term() {
        let c = coefficients_by_contour(0.0, 4, 0.5, 64).unwrap();
        assert!((c.coeffs[0] - 1.0 / TWO_THREE_HALVES).abs() < 1e-12);
        assert_eq!(c.method, SeriesMethod::Contour);
    }

    #[test]
    fn contour_rejects_bad_arguments() {
        assert!(coefficients_by_contour(0.0, 4, 1.0, 32).is_err());
        assert!(coefficients_by_contour(0.0, 10, 0.5, 20).is_err());
        assert!(coefficients_by_contour(0.0, 4, 0.5, 33).is_err());
        // too few nodes for a circle this close to the branch point
        assert!(matches!(
            coefficients_by_contour(0.0, 2, 0.99, 8),
            Err(Error::ContourUnresolved(_))
        ));
    }

    #[test]
    fn contour_agrees_with_recursion() {
        for &k in &[0.0, 1.0] {
            let rec = coefficients_by_recursion(k, 60);
            let con = coefficients_by_contour(k, 60, 0.8, 240).unwrap();
            for n in 0..=60 {
                assert!((rec.coeffs[n] - con.coeffs[n]).abs() < 1e-12, "k={k} n={n}");
            }
        }
    }

    #[test]
    fn coefficients_positive_at_zero_k() {
        let s = coefficients_by_recursion(0.0, 2000);
        assert!(s.coeffs.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn cnasy_at_zero_k_tends_to_one() {
        let rows = verify_cnasy(0.0, 1024).unwrap();
        assert_eq!(rows.first().unwrap().n, 16);
        assert_eq!(rows.last().unwrap().n, 1024);
        for w in rows.windows(2) {
            assert!(w[1].gap < w[0].gap);
        }
        assert!(rows.last().unwrap().gap < 2e-4);
        assert!(verify_cnasy(0.0, 8).is_err());
    }
}
