//! Transition, resolvent and perturbed kernels of the constant-coefficient
//! one-particle generator `G_1 = (sigma_0^2 / 2) Laplacian`, plus the
//! analytic checks that gate the local-time construction: the resolvent
//! identity `(lambda - G_1) Q^lambda_eps = q_eps`, kernel norm finiteness,
//! and the `chi_d` integrability bound that restricts the theory to d <= 3.

use crate::bessel::{bessel_i0_scaled, bessel_k0, bessel_k1};
use crate::error::{Result, SdsmError};
use crate::quad;
use serde::{Deserialize, Serialize};

/// Parameters of one kernel family: decay rate `lambda`, perturbation `eps`,
/// effective diffusion `sigma_0^2` (scalar) and dimension.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct KernelSpec {
    pub lambda: f64,
    pub eps: f64,
    pub sigma_sq: f64,
    pub d: usize,
}

impl KernelSpec {
    pub fn new(lambda: f64, eps: f64, sigma_sq: f64, d: usize) -> Result<Self> {
        if lambda <= 0.0 || sigma_sq <= 0.0 || d == 0 || eps < 0.0 {
            return Err(SdsmError::Config(format!(
                "kernel spec needs lambda > 0, sigma^2 > 0, eps >= 0, d >= 1; got \
                 lambda={lambda}, eps={eps}, sigma^2={sigma_sq}, d={d}"
            )));
        }
        Ok(Self { lambda, eps, sigma_sq, d })
    }

    /// Exponential decay rate `sqrt(2 lambda) / sigma_0` of the resolvent.
    pub fn decay_rate(&self) -> f64 {
        (2.0 * self.lambda).sqrt() / self.sigma_sq.sqrt()
    }
}

/// Gaussian transition density `q_t(0, x)` of `G_1`, at radius `r = |x|`.
pub fn heat_kernel_radial(spec: &KernelSpec, t: f64, r: f64) -> f64 {
    assert!(t > 0.0);
    let v = spec.sigma_sq * t;
    (2.0 * std::f64::consts::PI * v).powf(-(spec.d as f64) / 2.0) * (-r * r / (2.0 * v)).exp()
}

pub fn heat_kernel(spec: &KernelSpec, t: f64, x: &[f64]) -> f64 {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    heat_kernel_radial(spec, t, r)
}

/// Closed-form resolvent kernel `Q^lambda(x)` at radius `r`, for d = 1..4.
///
/// d=1: `e^{-c r} / (sigma sqrt(2 lambda))`;
/// d=2: `K0(c r) / (pi sigma^2)`;
/// d=3: `e^{-c r} / (2 pi sigma^2 r)`;
/// d=4: `c K1(c r) / (2 pi^2 sigma^2 r)`; with `c = sqrt(2 lambda)/sigma`.
pub fn q_lambda_radial(spec: &KernelSpec, r: f64) -> Result<f64> {
    let c = spec.decay_rate();
    let s2 = spec.sigma_sq;
    match spec.d {
        1 => Ok((-c * r).exp() / (s2.sqrt() * (2.0 * spec.lambda).sqrt())),
        2 => {
            require_off_origin(spec.d, r)?;
            Ok(bessel_k0(c * r) / (std::f64::consts::PI * s2))
        }
        3 => {
            require_off_origin(spec.d, r)?;
            Ok((-c * r).exp() / (2.0 * std::f64::consts::PI * s2 * r))
        }
        4 => {
            require_off_origin(spec.d, r)?;
            Ok(c * bessel_k1(c * r) / (2.0 * std::f64::consts::PI.powi(2) * s2 * r))
        }
        d => Err(SdsmError::DimensionUnsupported(d)),
    }
}

pub fn q_lambda(spec: &KernelSpec, x: &[f64]) -> Result<f64> {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    q_lambda_radial(spec, r)
}

/// Radial derivative of the closed-form `Q^lambda`.
pub fn q_lambda_radial_derivative(spec: &KernelSpec, r: f64) -> Result<f64> {
    let c = spec.decay_rate();
    let s2 = spec.sigma_sq;
    match spec.d {
        1 => Ok(-(-c * r).exp() / s2),
        2 => {
            require_off_origin(spec.d, r)?;
            Ok(-c * bessel_k1(c * r) / (std::f64::consts::PI * s2))
        }
        3 => {
            require_off_origin(spec.d, r)?;
            Ok(-(-c * r).exp() * (c * r + 1.0) / (2.0 * std::f64::consts::PI * s2 * r * r))
        }
        d => Err(SdsmError::DimensionUnsupported(d)),
    }
}

fn require_off_origin(d: usize, r: f64) -> Result<()> {
    if r <= 0.0 {
        return Err(SdsmError::Config(format!(
            "Q^lambda has a singularity at the origin for d = {d}; evaluate at x != 0"
        )));
    }
    Ok(())
}

/// Which time-integrand the Laplace quadrature should carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadialDeriv {
    Value,
    /// d/dr of the Gaussian kernel.
    First,
    /// d^2/dr^2.
    Second,
    /// Full Laplacian (includes the angular `(d-1)/r` term).
    Laplacian,
}

/// `e^{lambda eps} int_eps^inf e^{-lambda t} D q_t(r) dt` in log-time
/// coordinates, refined until stable to `rtol` relative.
///
/// With `eps = 0` this is the resolvent itself (r > 0 required for d >= 2);
/// with `eps > 0` it is the perturbed kernel `Q^lambda_eps` and its radial
/// derivatives, smooth everywhere.
pub fn laplace_radial(
    spec: &KernelSpec,
    eps: f64,
    r: f64,
    deriv: RadialDeriv,
    rtol: f64,
) -> Result<f64> {
    let d = spec.d as f64;
    let s2 = spec.sigma_sq;
    let lambda = spec.lambda;
    let b = r * r / (2.0 * s2);
    // Lower truncation: below t_lo the integrand is killed either by the
    // Gaussian factor e^{-b/t} (r > 0) or by the t^{1-d/2} Jacobian in
    // log-time (d = 1).
    let t_lo = if eps > 0.0 {
        eps
    } else if r > 0.0 {
        (b / 46.0).min(1e-3)
    } else if spec.d == 1 {
        match deriv {
            RadialDeriv::Value => 1e-26,
            _ => {
                return Err(SdsmError::Config(
                    "derivatives of Q^lambda at r = 0 need eps > 0".into(),
                ))
            }
        }
    } else {
        return Err(SdsmError::Config(
            "Q^lambda at the origin diverges for d >= 2; need eps > 0 or r > 0".into(),
        ));
    };
    let t_hi = 760.0 / lambda + eps;
    let s_lo = t_lo.ln();
    let s_hi = t_hi.ln();
    let integrand = |s: f64| {
        let t = s.exp();
        let v = s2 * t;
        let gauss =
            (2.0 * std::f64::consts::PI * v).powf(-d / 2.0) * (-r * r / (2.0 * v)).exp();
        let factor = match deriv {
            RadialDeriv::Value => 1.0,
            RadialDeriv::First => -r / v,
            RadialDeriv::Second => r * r / (v * v) - 1.0 / v,
            RadialDeriv::Laplacian => r * r / (v * v) - d / v,
        };
        // e^{-lambda (t - eps)} folds the e^{lambda eps} prefactor in.
        (-lambda * (t - eps)).exp() * factor * gauss * t
    };
    let span = (s_hi - s_lo).max(1.0);
    let refined = quad::refine_to(
        |level| {
            let panels = ((span / 2.0).ceil() as usize + 2) * (1 + level);
            quad::integrate_panels(&integrand, s_lo, s_hi, panels, 48)
        },
        rtol,
        6,
    );
    if !refined.converged {
        return Err(SdsmError::QuadratureNonConvergence {
            context: format!("laplace_radial d={} r={r} eps={eps} {:?}", spec.d, deriv),
            last_change: refined.last_change,
        });
    }
    Ok(refined.value)
}

/// Perturbed kernel `Q^lambda_eps` at radius r (requires eps > 0).
pub fn q_lambda_eps_radial(spec: &KernelSpec, r: f64) -> Result<f64> {
    if spec.eps <= 0.0 {
        return Err(SdsmError::Config("q_lambda_eps requires eps > 0".into()));
    }
    laplace_radial(spec, spec.eps, r, RadialDeriv::Value, 1e-10)
}

pub fn q_lambda_eps(spec: &KernelSpec, x: &[f64]) -> Result<f64> {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    q_lambda_eps_radial(spec, r)
}

/// Gradient of `Q^lambda_eps` at `x` (zero vector at the origin by radial
/// symmetry).
pub fn grad_q_lambda_eps(spec: &KernelSpec, x: &[f64]) -> Result<Vec<f64>> {
    if spec.eps <= 0.0 {
        return Err(SdsmError::Config("grad_q_lambda_eps requires eps > 0".into()));
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r < 1e-300 {
        return Ok(vec![0.0; spec.d]);
    }
    let dq = laplace_radial(spec, spec.eps, r, RadialDeriv::First, 1e-10)?;
    Ok(x.iter().map(|&xi| dq * xi / r).collect())
}

/// Independent evaluation of `Q^lambda_eps` through the semigroup identity
/// `Q^lambda_eps = Q^lambda * q_eps` (spatial convolution with the
/// closed-form resolvent). Used as a cross-check of the Laplace quadrature.
pub fn q_lambda_eps_convolution(spec: &KernelSpec, r: f64) -> Result<f64> {
    if spec.eps <= 0.0 {
        return Err(SdsmError::Config("convolution route requires eps > 0".into()));
    }
    let v = spec.sigma_sq * spec.eps;
    let width = v.sqrt();
    let zero_eps = KernelSpec { eps: 0.0, ..*spec };
    match spec.d {
        1 => {
            // int Q(|y|) q_eps(r - y) dy over the real line.
            let f = |y: f64| {
                let q = q_lambda_radial(&zero_eps, y.abs()).unwrap();
                let g = (2.0 * std::f64::consts::PI * v).powf(-0.5)
                    * (-(r - y) * (r - y) / (2.0 * v)).exp();
                q * g
            };
            let l = 12.0 * width + r + 60.0 / spec.decay_rate().max(0.5);
            Ok(quad::integrate_panels(&f, -l, l, 64, 32))
        }
        2 => {
            // Radial convolution against the 2-d Gaussian: the angular
            // integral gives a scaled Bessel I0.
            let f = |rho: f64| {
                if rho <= 0.0 {
                    return 0.0;
                }
                let q = q_lambda_radial(&zero_eps, rho).unwrap();
                let z = r * rho / v;
                // (rho / v) exp(-(r-rho)^2/(2v)) [e^{-z} I0(z)] collects the
                // exp(-(r^2+rho^2)/(2v)) I0(z) product without overflow.
                let a = (rho / v) * (-(r - rho) * (r - rho) / (2.0 * v)).exp()
                    * bessel_i0_scaled(z);
                q * a
            };
            let l = r + 14.0 * width + 60.0 / spec.decay_rate().max(0.5);
            Ok(quad::integrate_panels(&f, 0.0, l, 200, 32))
        }
        3 => {
            // Method of images on the radius for the 3-d Gaussian shell mass.
            let f = |rho: f64| {
                if rho <= 0.0 {
                    return 0.0;
                }
                let q = q_lambda_radial(&zero_eps, rho).unwrap();
                let norm = (2.0 * std::f64::consts::PI * v).powf(-0.5);
                let shell = if r < 1e-12 {
                    // Limit r -> 0: 4 pi rho^2 q_eps(rho) collapses to
                    // (rho^2/v) * 2 * norm * exp(-rho^2/(2v)) / ... use the
                    // exact shell density at the origin.
                    (rho * rho / v) * 2.0 * norm * (-rho * rho / (2.0 * v)).exp()
                } else {
                    (rho / r)
                        * norm
                        * ((-(r - rho) * (r - rho) / (2.0 * v)).exp()
                            - (-(r + rho) * (r + rho) / (2.0 * v)).exp())
                };
                q * shell
            };
            let l = r + 14.0 * width + 60.0 / spec.decay_rate().max(0.5);
            Ok(quad::integrate_panels(&f, 0.0, l, 200, 32))
        }
        d => Err(SdsmError::DimensionUnsupported(d)),
    }
}

/// Max residual of `(lambda - G_1) Q^lambda_eps(x) - q_eps(x)` over a radial
/// grid, with `G_1` applied through the closed-form derivatives of the
/// quadrature integrand.
pub fn resolvent_identity_residual(spec: &KernelSpec, radii: &[f64]) -> Result<f64> {
    if spec.eps <= 0.0 {
        return Err(SdsmError::Config("resolvent identity check requires eps > 0".into()));
    }
    let mut worst: f64 = 0.0;
    for &r in radii {
        let val = laplace_radial(spec, spec.eps, r, RadialDeriv::Value, 1e-11)?;
        let lap = laplace_radial(spec, spec.eps, r, RadialDeriv::Laplacian, 1e-11)?;
        let lhs = spec.lambda * val - 0.5 * spec.sigma_sq * lap;
        let rhs = heat_kernel_radial(spec, spec.eps, r);
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Report of the `chi_d` integrability check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiReport {
    pub d: usize,
    pub t: f64,
    pub lambda: f64,
    /// `chi_d(t)`; infinity for d = 4.
    pub chi: f64,
    /// `(t + 1) pi sqrt(pi / lambda)`.
    pub bound: f64,
    pub pass: bool,
    pub diverged: bool,
    /// Inner-cutoff refinement sequence (d = 4 diagnostics).
    pub refinement: Vec<f64>,
}

/// `chi_d(t) = int int e^{-lambda(u+v)} (uv)^{-1/2} int_0^t (2r+u+v)^{-d/2} dr du dv`.
///
/// The double (u, v) integral reduces, through the square and polar
/// substitutions, to `pi int_0^inf e^{-lambda s} g_d(s) ds` with the
/// closed-form inner integral `g_d` of `(2r + s)^{-d/2}`; for d <= 3 the
/// remaining singularity at s = 0 is integrable, for d = 4 the `t/(s(2t+s))`
/// behaviour makes the integral diverge logarithmically.
pub fn chi_bound_check(d: usize, t: f64, lambda: f64) -> Result<ChiReport> {
    assert!((1..=4).contains(&d));
    assert!(t > 0.0 && lambda > 0.0);
    let bound = (t + 1.0) * std::f64::consts::PI * (std::f64::consts::PI / lambda).sqrt();
    let inner = move |s: f64| -> f64 {
        match d {
            1 => (2.0 * t + s).sqrt() - s.sqrt(),
            2 => 0.5 * ((2.0 * t + s) / s).ln(),
            3 => 1.0 / s.sqrt() - 1.0 / (2.0 * t + s).sqrt(),
            4 => t / (s * (2.0 * t + s)),
            _ => unreachable!(),
        }
    };
    if d <= 3 {
        let refined = quad::exp_weighted_singular(&inner, lambda, 1e-9);
        if !refined.converged {
            return Err(SdsmError::QuadratureNonConvergence {
                context: format!("chi_{d}({t})"),
                last_change: refined.last_change,
            });
        }
        let chi = std::f64::consts::PI * refined.value;
        Ok(ChiReport {
            d,
            t,
            lambda,
            chi,
            bound,
            pass: chi <= bound,
            diverged: false,
            refinement: vec![chi],
        })
    } else {
        // Shrink the inner cutoff geometrically; the sequence must keep
        // growing by a non-vanishing increment (log divergence). Integrate
        // in log coordinates so the 1/s spike is actually resolved.
        let mut seq = Vec::new();
        for k in 1..=7 {
            let delta = 10f64.powi(-k);
            let u_lo = delta.ln();
            let u_hi = (760.0 / lambda).ln();
            let val = std::f64::consts::PI
                * quad::integrate_panels(
                    &|u: f64| {
                        let s = u.exp();
                        (-lambda * s).exp() * inner(s) * s
                    },
                    u_lo,
                    u_hi,
                    60,
                    24,
                );
            seq.push(val);
        }
        let mut growing = true;
        let mut last_inc = f64::INFINITY;
        for w in seq.windows(2) {
            let inc = w[1] - w[0];
            // Log divergence: increments settle to a positive constant.
            if inc < 0.25 * last_inc.min(1.0) {
                growing = false;
            }
            last_inc = inc;
        }
        Ok(ChiReport {
            d,
            t,
            lambda,
            chi: f64::INFINITY,
            bound,
            pass: growing,
            diverged: growing,
            refinement: seq,
        })
    }
}

/// One row of the kernel-norm report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormEntry {
    pub name: String,
    pub d: usize,
    pub value: f64,
    /// Analytic value when one exists (`1/lambda` for the L1 norm).
    pub expected: Option<f64>,
    /// Stable under quadrature refinement to 1e-6 relative.
    pub stable: bool,
    pub pass: bool,
}

/// L1/L2 norms of `Q^lambda` and its radial derivative, with the d = 4
/// square norm reported as refinement-divergent.
pub fn norm_report(lambda: f64, sigma_sq: f64) -> Result<Vec<NormEntry>> {
    let mut rows = Vec::new();
    let surface = |d: usize| -> f64 {
        match d {
            1 => 2.0,
            2 => 2.0 * std::f64::consts::PI,
            3 => 4.0 * std::f64::consts::PI,
            _ => unreachable!(),
        }
    };
    for d in 1..=3usize {
        let spec = KernelSpec::new(lambda, 0.0, sigma_sq, d)?;
        let c = spec.decay_rate();
        let r_max = 745.0 / c;
        let radial = |f: &dyn Fn(f64) -> f64, level: usize| -> f64 {
            // Geometric panels toward the origin absorb the integrable
            // singularities of the d >= 2 kernels.
            let n = 24 << level.min(2);
            let mut total = 0.0;
            let mut hi = 1.0 / c;
            for _ in 0..(30 + 10 * level) {
                let lo = hi * 0.6;
                total += quad::integrate_gl(f, lo, hi, n);
                hi = lo;
            }
            total += quad::integrate_gl(f, 0.0, hi, n);
            total += quad::integrate_panels(f, 1.0 / c, r_max, 40 + 20 * level, n);
            total
        };
        let dd = d;
        let l1 = quad::refine_to(
            |lv| {
                radial(
                    &|r: f64| q_lambda_radial(&spec, r).unwrap() * r.powi(dd as i32 - 1),
                    lv,
                ) * surface(dd)
            },
            1e-8,
            3,
        );
        rows.push(NormEntry {
            name: "L1(Q)".into(),
            d,
            value: l1.value,
            expected: Some(1.0 / lambda),
            stable: l1.converged,
            pass: l1.converged && (l1.value - 1.0 / lambda).abs() <= 1e-6 * (1.0 / lambda).max(1.0),
        });
        let dl1 = quad::refine_to(
            |lv| {
                radial(
                    &|r: f64| {
                        q_lambda_radial_derivative(&spec, r).unwrap().abs() * r.powi(dd as i32 - 1)
                    },
                    lv,
                ) * surface(dd)
            },
            1e-8,
            3,
        );
        rows.push(NormEntry {
            name: "L1(dQ)".into(),
            d,
            value: dl1.value,
            expected: None,
            stable: dl1.converged,
            pass: dl1.converged && dl1.value.is_finite(),
        });
        let l2 = quad::refine_to(
            |lv| {
                radial(
                    &|r: f64| q_lambda_radial(&spec, r).unwrap().powi(2) * r.powi(dd as i32 - 1),
                    lv,
                ) * surface(dd)
            },
            1e-8,
            3,
        );
        let l2_expected = if d == 1 {
            // 2 int_0^inf e^{-2cr}/(2 lambda sigma^2) dr = 1/(2 lambda sigma^2 c)
            Some(1.0 / (2.0 * lambda * sigma_sq * c))
        } else {
            None
        };
        rows.push(NormEntry {
            name: "L2sq(Q)".into(),
            d,
            value: l2.value,
            expected: l2_expected,
            stable: l2.converged,
            pass: l2.converged
                && l2_expected.map_or(l2.value.is_finite(), |e| {
                    (l2.value - e).abs() <= 1e-6 * e.max(1.0)
                }),
        });
    }
    // d = 1 derivative square norm: finite and refinement-stable.
    {
        let spec = KernelSpec::new(lambda, 0.0, sigma_sq, 1)?;
        let c = spec.decay_rate();
        let dl2 = quad::refine_to(
            |lv| {
                2.0 * quad::integrate_panels(
                    &|r: f64| q_lambda_radial_derivative(&spec, r).unwrap().powi(2),
                    0.0,
                    745.0 / (2.0 * c),
                    30 + 15 * lv,
                    32,
                )
            },
            1e-8,
            3,
        );
        rows.push(NormEntry {
            name: "L2sq(dQ)".into(),
            d: 1,
            value: dl2.value,
            expected: Some(1.0 / (sigma_sq * sigma_sq * c)),
            stable: dl2.converged,
            pass: dl2.converged,
        });
    }
    // d = 4 square norm: the 1/r^2 singularity makes it log-divergent;
    // report the inner-cutoff growth.
    {
        let spec = KernelSpec::new(lambda, 0.0, sigma_sq, 4)?;
        let c = spec.decay_rate();
        let mut prev = 0.0;
        let mut increments = Vec::new();
        for k in 1..=6 {
            let cutoff = 10f64.powi(-k) / c;
            // Log-radius coordinates: the integrand behaves like 1/r near 0.
            let val = 2.0
                * std::f64::consts::PI.powi(2)
                * quad::integrate_panels(
                    &|u: f64| {
                        let r = u.exp();
                        q_lambda_radial(&spec, r).unwrap().powi(2) * r.powi(4)
                    },
                    cutoff.ln(),
                    (745.0 / (2.0 * c)).ln(),
                    80,
                    24,
                );
            if k > 1 {
                increments.push(val - prev);
            }
            prev = val;
        }
        // Log divergence: increments stay bounded away from zero.
        let diverged = increments.iter().all(|&i| i > 0.5 * increments[0]);
        rows.push(NormEntry {
            name: "L2sq(Q) divergent".into(),
            d: 4,
            value: f64::INFINITY,
            expected: None,
            stable: false,
            pass: diverged,
        });
    }
    Ok(rows)
}

/// Fitted Gaussian-envelope constants `(a1, a2)` such that
/// `|D q_t| <= a1 t^{-(d + k)/2} exp(-a2 |x|^2 / t)` over a (t, r) grid, for
/// the kernel and its first two radial derivatives. Diagnostic only.
pub fn gaussian_envelope_fit(spec: &KernelSpec) -> Vec<(String, f64, f64, bool)> {
    let d = spec.d as f64;
    let a2 = 0.8 / (2.0 * spec.sigma_sq);
    let mut out = Vec::new();
    for (name, order, deriv) in [
        ("q", 0.0, RadialDeriv::Value),
        ("dq", 1.0, RadialDeriv::First),
        ("d2q", 2.0, RadialDeriv::Second),
    ] {
        let mut a1: f64 = 0.0;
        let mut valid = true;
        for ti in 1..=20 {
            let t = ti as f64 * 0.05;
            for ri in 0..=40 {
                let r = ri as f64 * 0.25;
                let v = spec.sigma_sq * t;
                let gauss = (2.0 * std::f64::consts::PI * v).powf(-d / 2.0)
                    * (-r * r / (2.0 * v)).exp();
                let val = match deriv {
                    RadialDeriv::Value => gauss,
                    RadialDeriv::First => -r / v * gauss,
                    RadialDeriv::Second => (r * r / (v * v) - 1.0 / v) * gauss,
                    RadialDeriv::Laplacian => unreachable!(),
                };
                let envelope = t.powf(-(d + order) / 2.0) * (-a2 * r * r / t).exp();
                let ratio = val.abs() / envelope;
                if !ratio.is_finite() {
                    valid = false;
                }
                a1 = a1.max(ratio);
            }
        }
        out.push((name.to_string(), a1, a2, valid && a1.is_finite()));
    }
    out
}

/// Radial lookup table of `Q^lambda_eps` for hot-loop observable evaluation:
/// cubic Hermite interpolation of the value and first derivative, with the
/// second derivative carried for the generator contraction.
#[derive(Debug)]
pub struct KernelTable {
    pub spec: KernelSpec,
    step: f64,
    f0: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    r_max: f64,
}

impl KernelTable {
    /// Build a table covering `[0, r_max]` at spacing `step` by a single
    /// Gauss-Legendre pass per node over log-time.
    pub fn build(spec: &KernelSpec, r_max: f64, step: f64) -> Result<Self> {
        if spec.eps <= 0.0 {
            return Err(SdsmError::Config("kernel tables need eps > 0".into()));
        }
        let n = (r_max / step).ceil() as usize + 2;
        let d = spec.d as f64;
        let lambda = spec.lambda;
        let eps = spec.eps;
        let s2 = spec.sigma_sq;
        let t_hi = 760.0 / lambda + eps;
        let s_lo = eps.ln();
        let s_hi = t_hi.ln();
        let panels = ((s_hi - s_lo) / 1.5).ceil() as usize + 4;
        let (nodes, weights) = quad::gauss_legendre(64);
        // Precompute the quadrature abscissae in t once.
        let mut ts = Vec::new();
        let h = (s_hi - s_lo) / panels as f64;
        for p in 0..panels {
            let lo = s_lo + p as f64 * h;
            let c = 0.5 * h;
            let mid = lo + c;
            for (x, w) in nodes.iter().zip(&weights) {
                let s = mid + c * x;
                let t = s.exp();
                ts.push((t, w * c * t * (-lambda * (t - eps)).exp()));
            }
        }
        let mut f0 = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        let mut f2 = vec![0.0; n];
        for i in 0..n {
            let r = i as f64 * step;
            let (mut v0, mut v1, mut v2) = (0.0, 0.0, 0.0);
            for &(t, w) in &ts {
                let var = s2 * t;
                let gauss = (2.0 * std::f64::consts::PI * var).powf(-d / 2.0)
                    * (-r * r / (2.0 * var)).exp();
                let g = w * gauss;
                v0 += g;
                v1 += g * (-r / var);
                v2 += g * (r * r / (var * var) - 1.0 / var);
            }
            f0[i] = v0;
            f1[i] = v1;
            f2[i] = v2;
        }
        // Third derivative nodes by central differences of the second; only
        // used to interpolate the second derivative smoothly.
        let mut f3 = vec![0.0; n];
        for i in 1..n - 1 {
            f3[i] = (f2[i + 1] - f2[i - 1]) / (2.0 * step);
        }
        f3[0] = 0.0;
        f3[n - 1] = f3[n - 2];
        Ok(Self { spec: *spec, step, f0, f1, f2, f3, r_max: (n - 2) as f64 * step })
    }

    fn hermite(&self, f: &[f64], fp: &[f64], r: f64) -> f64 {
        let r = r.abs();
        if r >= self.r_max {
            // Far tail: exponentially small; extend with the last node decay.
            let c = self.spec.decay_rate();
            let idx = f.len() - 2;
            return f[idx] * (-(c * (r - idx as f64 * self.step))).exp();
        }
        let q = r / self.step;
        let i = q as usize;
        let u = q - i as f64;
        let u2 = u * u;
        let u3 = u2 * u;
        f[i] * (2.0 * u3 - 3.0 * u2 + 1.0)
            + f[i + 1] * (3.0 * u2 - 2.0 * u3)
            + self.step * (fp[i] * (u3 - 2.0 * u2 + u) + fp[i + 1] * (u3 - u2))
    }

    pub fn value(&self, r: f64) -> f64 {
        self.hermite(&self.f0, &self.f1, r)
    }

    /// Radial derivative (odd extension through the origin is handled by the
    /// caller via the direction vector).
    pub fn derivative(&self, r: f64) -> f64 {
        self.hermite(&self.f1, &self.f2, r)
    }

    pub fn second_derivative(&self, r: f64) -> f64 {
        self.hermite(&self.f2, &self.f3, r)
    }
}

/// Radial table of the resolvent-identity form
/// `f(r) = (lambda - G_1) Q^lambda_eps(r)` with exact-derivative Hermite
/// data; analytically this equals `q_eps(r)`, but every node is computed
/// through the kernel quadratures so the table measures the identity rather
/// than assuming it.
#[derive(Debug)]
pub struct ResolventFormTable {
    pub spec: KernelSpec,
    step: f64,
    f0: Vec<f64>,
    f1: Vec<f64>,
    r_max: f64,
}

impl ResolventFormTable {
    pub fn build(spec: &KernelSpec, r_max: f64, step: f64) -> Result<Self> {
        if spec.eps <= 0.0 {
            return Err(SdsmError::Config("resolvent-form tables need eps > 0".into()));
        }
        let n = (r_max / step).ceil() as usize + 2;
        let d = spec.d as f64;
        let lambda = spec.lambda;
        let eps = spec.eps;
        let s2 = spec.sigma_sq;
        let t_hi = 760.0 / lambda + eps;
        let s_lo = eps.ln();
        let s_hi = t_hi.ln();
        let panels = ((s_hi - s_lo) / 1.0).ceil() as usize + 6;
        let (nodes, weights) = quad::gauss_legendre(64);
        let mut ts = Vec::new();
        let h = (s_hi - s_lo) / panels as f64;
        for p in 0..panels {
            let lo = s_lo + p as f64 * h;
            let c = 0.5 * h;
            let mid = lo + c;
            for (x, w) in nodes.iter().zip(&weights) {
                let s = mid + c * x;
                let t = s.exp();
                ts.push((t, w * c * t * (-lambda * (t - eps)).exp()));
            }
        }
        let mut f0 = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        for i in 0..n {
            let r = i as f64 * step;
            let (mut value, mut first, mut lap, mut lap_prime) = (0.0, 0.0, 0.0, 0.0);
            for &(t, w) in &ts {
                let v = s2 * t;
                let gauss = (2.0 * std::f64::consts::PI * v).powf(-d / 2.0)
                    * (-r * r / (2.0 * v)).exp();
                let g = w * gauss;
                value += g;
                first += g * (-r / v);
                lap += g * (r * r / (v * v) - d / v);
                lap_prime += g * (r / (v * v)) * (2.0 + d - r * r / v);
            }
            f0[i] = lambda * value - 0.5 * s2 * lap;
            f1[i] = lambda * first - 0.5 * s2 * lap_prime;
        }
        Ok(Self { spec: *spec, step, f0, f1, r_max: (n - 2) as f64 * step })
    }

    pub fn value(&self, r: f64) -> f64 {
        let r = r.abs();
        if r >= self.r_max {
            return 0.0; // q_eps tail, below 1e-12 for the ranges tabulated
        }
        let q = r / self.step;
        let i = q as usize;
        let u = q - i as f64;
        let u2 = u * u;
        let u3 = u2 * u;
        self.f0[i] * (2.0 * u3 - 3.0 * u2 + 1.0)
            + self.f0[i + 1] * (3.0 * u2 - 2.0 * u3)
            + self.step * (self.f1[i] * (u3 - 2.0 * u2 + u) + self.f1[i + 1] * (u3 - u2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ref_spec(lambda: f64, eps: f64) -> KernelSpec {
        KernelSpec::new(lambda, eps, 2.0, 1).unwrap()
    }

    #[test]
    fn heat_kernel_values() {
        // d=1, sigma^2=2, t=1, x=0 -> 1/sqrt(4 pi)
        let spec = ref_spec(1.0, 0.0);
        let v = heat_kernel_radial(&spec, 1.0, 0.0);
        assert!((v - 1.0 / (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((v - 0.282_094_791_773_878_14).abs() < 1e-15);
        // Symmetry and normalization.
        assert_eq!(heat_kernel(&spec, 0.7, &[1.3]), heat_kernel(&spec, 0.7, &[-1.3]));
        let mass = quad::integrate_panels(&|x: f64| heat_kernel(&spec, 0.5, &[x]), -20.0, 20.0, 40, 32);
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn chapman_kolmogorov() {
        let spec = ref_spec(1.0, 0.0);
        for (s, t, x) in [(0.3, 0.5, 0.7), (0.1, 1.2, -1.0)] {
            let conv = quad::integrate_panels(
                &|y: f64| heat_kernel_radial(&spec, s, (x - y).abs()) * heat_kernel_radial(&spec, t, y.abs()),
                -25.0,
                25.0,
                50,
                32,
            );
            let direct = heat_kernel_radial(&spec, s + t, x.abs());
            assert!((conv - direct).abs() < 1e-8, "s={s} t={t} x={x}");
        }
    }

    #[test]
    fn q_lambda_closed_forms_reference() {
        // d=1, sigma^2=2, lambda=1: c = 1, Q(0) = 0.5, Q(2) = 0.5 e^{-2}.
        let spec = ref_spec(1.0, 0.0);
        assert!((q_lambda_radial(&spec, 0.0).unwrap() - 0.5).abs() < 1e-15);
        let v = q_lambda_radial(&spec, 2.0).unwrap();
        assert!((v - 0.067_667_641_618_306_35).abs() < 1e-15);
    }

    #[test]
    fn q_lambda_matches_laplace_quadrature() {
        // Laplace consistency: closed forms vs adaptive quadrature of the
        // heat kernel, d = 1, 2, 3, |x| in [0.05, 10].
        for d in 1..=3usize {
            let spec = KernelSpec::new(1.3, 0.0, 2.0, d).unwrap();
            for &r in &[0.05, 0.3, 1.0, 4.0, 10.0] {
                let closed = q_lambda_radial(&spec, r).unwrap();
                let quadv = laplace_radial(&spec, 0.0, r, RadialDeriv::Value, 1e-11).unwrap();
                assert!(
                    (closed - quadv).abs() < 1e-7 * closed.abs().max(1.0),
                    "d={d} r={r}: closed {closed} quad {quadv}"
                );
            }
        }
    }

    #[test]
    fn q_lambda_l1_is_inverse_lambda() {
        // Fubini on the normalized heat kernel: independent oracle computed
        // by radial quadrature for each d, with geometric panels absorbing
        // the integrable singularity at the origin.
        for d in 1..=3usize {
            for &lambda in &[0.5, 1.0, 2.0] {
                let spec = KernelSpec::new(lambda, 0.0, 2.0, d).unwrap();
                let surface = [2.0, 2.0 * std::f64::consts::PI, 4.0 * std::f64::consts::PI][d - 1];
                let f = |r: f64| {
                    if r <= 0.0 {
                        0.0
                    } else {
                        q_lambda_radial(&spec, r).unwrap() * r.powi(d as i32 - 1)
                    }
                };
                let mut mass = 0.0;
                let mut hi = 1.0;
                for _ in 0..50 {
                    let lo = hi * 0.5;
                    mass += quad::integrate_panels(&f, lo, hi, 2, 32);
                    hi = lo;
                }
                mass += quad::integrate_panels(&f, 1.0, 800.0 / spec.decay_rate(), 400, 32);
                mass *= surface;
                assert!(
                    (mass - 1.0 / lambda).abs() < 1e-6,
                    "d={d} lambda={lambda}: {mass}"
                );
            }
        }
    }

    #[test]
    fn eps_kernel_two_routes_agree() {
        for d in 1..=3usize {
            let spec = KernelSpec::new(1.0, 0.1, 2.0, d).unwrap();
            for &r in &[0.0, 0.5, 1.0, 3.0] {
                let direct = q_lambda_eps_radial(&spec, r).unwrap();
                let conv = q_lambda_eps_convolution(&spec, r).unwrap();
                assert!(
                    (direct - conv).abs() < 1e-7 * direct.abs().max(1.0),
                    "d={d} r={r}: direct {direct} conv {conv}"
                );
            }
        }
    }

    #[test]
    fn eps_kernel_converges_to_resolvent() {
        let spec = KernelSpec::new(1.0, 1e-6, 2.0, 1).unwrap();
        let v_eps = q_lambda_eps_radial(&spec, 1.0).unwrap();
        let v0 = q_lambda_radial(&spec, 1.0).unwrap();
        assert!((v_eps - v0).abs() <= 1e-4);
    }

    #[test]
    fn gradient_zero_at_origin_and_matches_fd() {
        let spec = KernelSpec::new(1.0, 0.2, 2.0, 2).unwrap();
        let g0 = grad_q_lambda_eps(&spec, &[0.0, 0.0]).unwrap();
        assert!(g0.iter().all(|&g| g == 0.0));
        let x = [0.7, -0.4];
        let g = grad_q_lambda_eps(&spec, &x).unwrap();
        let h = 1e-4;
        for p in 0..2 {
            let mut xp = x;
            xp[p] += h;
            let fp = q_lambda_eps(&spec, &xp).unwrap();
            xp[p] -= 2.0 * h;
            let fm = q_lambda_eps(&spec, &xp).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-5 * (1.0 + fd.abs()), "p={p}");
        }
    }

    #[test]
    fn eps_kernel_monotone_in_radius_and_eps_derivative_identity() {
        // Strictly decreasing in |x|; in eps the exact derivative is
        // d/d eps Q^lambda_eps = lambda Q^lambda_eps - q_eps, negative where
        // the mollifier mass dominates (near the origin) and checked here
        // against a central finite difference everywhere.
        let spec1 = KernelSpec::new(1.0, 0.1, 2.0, 1).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let r = 0.3 * i as f64;
            let v = q_lambda_eps_radial(&spec1, r).unwrap();
            assert!(v < prev);
            prev = v;
        }
        for &r in &[0.0, 0.2, 0.5, 2.0] {
            let h = 1e-5;
            let up = KernelSpec { eps: spec1.eps + h, ..spec1 };
            let dn = KernelSpec { eps: spec1.eps - h, ..spec1 };
            let fd = (q_lambda_eps_radial(&up, r).unwrap()
                - q_lambda_eps_radial(&dn, r).unwrap())
                / (2.0 * h);
            let exact = spec1.lambda * q_lambda_eps_radial(&spec1, r).unwrap()
                - heat_kernel_radial(&spec1, spec1.eps, r);
            assert!((fd - exact).abs() < 1e-5, "r={r}: fd {fd} vs exact {exact}");
        }
        // Near the origin at small eps the kernel decreases in eps.
        let tight = KernelSpec::new(1.0, 0.02, 2.0, 1).unwrap();
        let smoother = KernelSpec::new(1.0, 0.05, 2.0, 1).unwrap();
        assert!(
            q_lambda_eps_radial(&smoother, 0.0).unwrap()
                < q_lambda_eps_radial(&tight, 0.0).unwrap()
        );
    }

    #[test]
    fn resolvent_identity_on_grid() {
        let radii: Vec<f64> = (0..=50).map(|i| i as f64 * 0.1).collect();
        let spec = KernelSpec::new(1.0, 0.1, 2.0, 1).unwrap();
        let res = resolvent_identity_residual(&spec, &radii).unwrap();
        assert!(res <= 1e-6, "residual {res}");
        // Identity holds for every lambda.
        let spec2 = KernelSpec::new(2.0, 0.1, 2.0, 1).unwrap();
        assert!(resolvent_identity_residual(&spec2, &radii).unwrap() <= 1e-6);
    }

    #[test]
    fn resolvent_identity_negative_control() {
        // Replacing q_eps by q_{2 eps} must leave a residual bounded away
        // from zero.
        let spec = KernelSpec::new(1.0, 0.1, 2.0, 1).unwrap();
        let r = 0.3;
        let val = laplace_radial(&spec, 0.1, r, RadialDeriv::Value, 1e-11).unwrap();
        let lap = laplace_radial(&spec, 0.1, r, RadialDeriv::Laplacian, 1e-11).unwrap();
        let lhs = spec.lambda * val - 0.5 * spec.sigma_sq * lap;
        let wrong = heat_kernel_radial(&spec, 0.2, r);
        assert!((lhs - wrong).abs() > 1e-2);
    }

    #[test]
    fn chi_bounds() {
        let expected_bound = 2.0 * std::f64::consts::PI * std::f64::consts::PI.sqrt();
        for d in 1..=3 {
            let rep = chi_bound_check(d, 1.0, 1.0).unwrap();
            assert!((rep.bound - expected_bound).abs() < 1e-12);
            assert!(rep.pass, "chi_{d} = {} > bound {}", rep.chi, rep.bound);
            assert!(rep.chi > 0.0 && rep.chi.is_finite());
        }
        let rep4 = chi_bound_check(4, 1.0, 1.0).unwrap();
        assert!(rep4.diverged, "chi_4 refinement must diverge: {:?}", rep4.refinement);
        // Bound scaling: bound(lambda) / bound(4 lambda) = 2 exactly.
        let b1 = chi_bound_check(1, 1.0, 1.0).unwrap().bound;
        let b4 = chi_bound_check(1, 1.0, 4.0).unwrap().bound;
        assert!((b1 / b4 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn chi2_below_chi1_plus_chi3() {
        let c1 = chi_bound_check(1, 1.0, 1.0).unwrap().chi;
        let c2 = chi_bound_check(2, 1.0, 1.0).unwrap().chi;
        let c3 = chi_bound_check(3, 1.0, 1.0).unwrap().chi;
        assert!(c2 <= c1 + c3 + 1e-9);
    }

    #[test]
    fn norms_reference() {
        let rows = norm_report(1.0, 2.0).unwrap();
        for row in &rows {
            assert!(row.pass, "norm row failed: {row:?}");
        }
        // d=1 reference: L2sq(Q) = 0.25.
        let l2 = rows
            .iter()
            .find(|r| r.name == "L2sq(Q)" && r.d == 1)
            .unwrap();
        assert!((l2.value - 0.25).abs() < 1e-6);
        let div = rows.iter().find(|r| r.d == 4).unwrap();
        assert!(div.pass && !div.stable);
    }

    #[test]
    fn kernel_table_matches_direct_evaluation() {
        let spec = KernelSpec::new(1.0, 0.05, 2.0, 1).unwrap();
        let table = KernelTable::build(&spec, 12.0, 2e-3).unwrap();
        for &r in &[0.0, 0.013, 0.5, 1.234, 4.0, 9.9] {
            let tv = table.value(r);
            let dv = laplace_radial(&spec, spec.eps, r, RadialDeriv::Value, 1e-11).unwrap();
            assert!((tv - dv).abs() < 1e-8 * dv.max(1e-3), "r={r}: {tv} vs {dv}");
            let td = table.derivative(r);
            let dd = laplace_radial(&spec, spec.eps, r, RadialDeriv::First, 1e-11).unwrap();
            assert!((td - dd).abs() < 1e-7 * (1.0 + dd.abs()), "r={r}: {td} vs {dd}");
        }
    }

    #[test]
    fn resolvent_form_table_reproduces_q_eps() {
        // The tabulated (lambda - G1) Q^lambda_eps must reproduce q_eps to
        // quadrature accuracy, independently of lambda.
        for &lambda in &[0.5, 1.0, 2.0] {
            let spec = KernelSpec::new(lambda, 0.05, 2.0, 1).unwrap();
            let table = ResolventFormTable::build(&spec, 12.0, 2e-3).unwrap();
            for &r in &[0.0, 0.17, 0.5, 1.0, 2.9] {
                let expect = heat_kernel_radial(&spec, 0.05, r);
                let got = table.value(r);
                assert!(
                    (got - expect).abs() < 1e-8,
                    "lambda={lambda} r={r}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn envelope_fit_is_valid() {
        let spec = ref_spec(1.0, 0.0);
        for (name, a1, a2, valid) in gaussian_envelope_fit(&spec) {
            assert!(valid && a1.is_finite() && a2 > 0.0, "{name}: a1={a1}");
        }
    }
}
