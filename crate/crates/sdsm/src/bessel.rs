//! Modified Bessel functions K0, K1 and scaled I0 on the positive axis.
//!
//! K0/K1 use the ascending series for small argument and the asymptotic
//! expansion for large argument. The asymptotic series at the classical
//! crossover point 2 only reaches ~1e-4 relative accuracy, which is not
//! enough for the kernel cross-checks, so the middle band falls back to the
//! integral representation `K_nu(x) = int_0^inf e^{-x cosh t} cosh(nu t) dt`
//! evaluated by Gauss-Legendre panels.

use crate::quad;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const SERIES_CUT: f64 = 2.0;
const ASYMPTOTIC_CUT: f64 = 14.0;

/// K0(x) for x > 0.
pub fn bessel_k0(x: f64) -> f64 {
    assert!(x > 0.0, "K0 requires a positive argument");
    if x <= SERIES_CUT {
        k0_series(x)
    } else if x >= ASYMPTOTIC_CUT {
        k_asymptotic(0, x)
    } else {
        k_integral(0, x)
    }
}

/// K1(x) for x > 0.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "K1 requires a positive argument");
    if x <= SERIES_CUT {
        k1_series(x)
    } else if x >= ASYMPTOTIC_CUT {
        k_asymptotic(1, x)
    } else {
        k_integral(1, x)
    }
}

/// `e^{-x} I0(x)` for x >= 0, stable for large x.
pub fn bessel_i0_scaled(x: f64) -> f64 {
    assert!(x >= 0.0);
    if x < 12.0 {
        // All-positive ascending series, then scale.
        let q = x * x / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..200 {
            term *= q / ((k * k) as f64);
            sum += term;
            if term < sum * 1e-18 {
                break;
            }
        }
        sum * (-x).exp()
    } else {
        // I0(x) ~ e^x / sqrt(2 pi x) [1 + 1/(8x) + 9/(2!(8x)^2) + ...],
        // term ratio (2k-1)^2 / (8 k x).
        let mut sum = 1.0;
        let mut term = 1.0;
        for k in 1..30 {
            let kf = k as f64;
            let next = term * (2.0 * kf - 1.0).powi(2) / (8.0 * kf * x);
            if next > term {
                break; // asymptotic series started diverging
            }
            term = next;
            sum += term;
            if term < 1e-18 {
                break;
            }
        }
        sum / (2.0 * std::f64::consts::PI * x).sqrt()
    }
}

fn i0_series(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

fn i1_series(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = x / 2.0;
    let mut sum = term;
    for k in 1..200 {
        term *= q / ((k * (k + 1)) as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

fn k0_series(x: f64) -> f64 {
    let q = x * x / 4.0;
    let log_half = (x / 2.0).ln();
    let mut sum = -(log_half + EULER_GAMMA) * i0_series(x);
    let mut term = 1.0;
    let mut harmonic = 0.0;
    for k in 1..200 {
        term *= q / ((k * k) as f64);
        harmonic += 1.0 / k as f64;
        let add = term * harmonic;
        sum += add;
        if add.abs() < sum.abs() * 1e-18 {
            break;
        }
    }
    sum
}

fn k1_series(x: f64) -> f64 {
    // K1(x) = 1/x + ln(x/2) I1(x) - (x/4) sum (psi(k+1)+psi(k+2)) q^k / (k! (k+1)!)
    let q = x * x / 4.0;
    let mut sum = 1.0 / x + (x / 2.0).ln() * i1_series(x);
    let mut psi_a = -EULER_GAMMA; // psi(1)
    let mut psi_b = 1.0 - EULER_GAMMA; // psi(2)
    let mut coef = 1.0; // 1/(k! (k+1)!) * q^k, k = 0
    let mut k = 0usize;
    loop {
        let add = -(x / 4.0) * (psi_a + psi_b) * coef;
        sum += add;
        if add.abs() < sum.abs() * 1e-18 || k > 200 {
            break;
        }
        k += 1;
        coef *= q / ((k * (k + 1)) as f64);
        psi_a += 1.0 / k as f64;
        psi_b += 1.0 / (k + 1) as f64;
    }
    sum
}

fn k_asymptotic(nu: u32, x: f64) -> f64 {
    let mu = 4.0 * (nu * nu) as f64;
    let mut sum = 1.0;
    let mut term = 1.0;
    for k in 1..40 {
        let kf = k as f64;
        term *= (mu - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * x);
        if term.abs() < 1e-18 {
            sum += term;
            break;
        }
        sum += term;
    }
    (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() * sum
}

fn k_integral(nu: u32, x: f64) -> f64 {
    // Truncate where x cosh t exceeds 760 (integrand underflows).
    let t_max = (760.0 / x).acosh();
    quad::integrate_panels(
        &|t: f64| {
            let w = (-x * t.cosh()).exp();
            if nu == 0 {
                w
            } else {
                w * t.cosh()
            }
        },
        0.0,
        t_max,
        8,
        48,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wronskian_identity() {
        // I0(x) K1(x) + I1(x) K0(x) = 1/x, exact for all x > 0.
        for &x in &[0.05, 0.3, 1.0, 1.9, 2.0, 2.1, 3.0, 5.0, 8.0, 13.9, 14.1, 20.0] {
            let lhs = i0_series(x) * bessel_k1(x) + i1_series(x) * bessel_k0(x);
            let rel = (lhs - 1.0 / x).abs() * x;
            assert!(rel < 1e-10, "x = {x}: wronskian gap {rel}");
        }
    }

    #[test]
    fn known_values() {
        assert!((bessel_k0(1.0) - 0.421_024_438_240_708).abs() < 1e-12);
        assert!((bessel_k1(1.0) - 0.601_907_230_197_234_6).abs() < 1e-12);
        assert!((bessel_k0(2.0) - 0.113_893_872_749_533_4).abs() < 1e-12);
    }

    #[test]
    fn branch_agreement_at_crossovers() {
        // The two evaluation methods meeting at each crossover agree on the
        // crossover point itself.
        for nu in [0u32, 1u32] {
            let series = if nu == 0 { k0_series(SERIES_CUT) } else { k1_series(SERIES_CUT) };
            let mid = k_integral(nu, SERIES_CUT);
            assert!((series - mid).abs() < 1e-12 * series, "nu={nu}: {series} vs {mid}");
            let asym = k_asymptotic(nu, ASYMPTOTIC_CUT);
            let mid = k_integral(nu, ASYMPTOTIC_CUT);
            assert!((asym - mid).abs() < 1e-10 * asym, "nu={nu}: {asym} vs {mid}");
        }
    }

    #[test]
    fn k0_radial_first_moment() {
        // int_0^inf K0(r) r dr = 1. The log singularity at 0 needs
        // geometrically refined panels.
        let mut v = 0.0;
        let mut hi = 1.0;
        for _ in 0..40 {
            let lo = hi * 0.5;
            v += quad::integrate_panels(&|r: f64| bessel_k0(r) * r, lo, hi, 2, 32);
            hi = lo;
        }
        v += quad::integrate_panels(&|r: f64| bessel_k0(r) * r, 1.0, 60.0, 118, 32);
        assert!((v - 1.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn i0_scaled_matches_series() {
        for &x in &[0.0, 0.5, 3.0, 11.9, 12.1, 40.0] {
            let series = if x < 60.0 { i0_series(x) * (-x).exp() } else { f64::NAN };
            let v = bessel_i0_scaled(x);
            if series.is_finite() {
                assert!((v - series).abs() < 1e-12 * series.max(1.0), "x = {x}");
            }
        }
    }
}
