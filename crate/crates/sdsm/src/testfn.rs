//! Test functions (observables) paired against the empirical measure.
//!
//! Each family supplies the value, gradient and Hessian needed by the
//! martingale accumulators: the gradient feeds the common-noise integral
//! `X_t(phi)`, the Hessian feeds `<G_1 phi, mu>`, and the value feeds the
//! branching martingale and the occupation integrals.

use crate::green::KernelTable;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone)]
pub enum TestFunction {
    /// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
    GaussianBump { center: Vec<f64>, width: f64, amplitude: f64 },
    Constant { value: f64 },
    /// `(c0 + c1 x_p + c2 x_p^2) * I_a(x)` with `I_a(x) = (1 + |x|^2)^{-a/2}`.
    WeightedPoly { axis: usize, coeffs: [f64; 3], a: f64 },
    /// Smooth compactly supported bump `exp(1 - 1/(1 - (r/radius)^2))` on
    /// `r < radius`, zero outside.
    CompactBump { center: Vec<f64>, radius: f64 },
    /// Translated resolvent kernel `z -> Q^lambda_eps(x - z)`, evaluated from
    /// a precomputed radial table.
    ResolventKernel { center: Vec<f64>, table: Arc<KernelTable> },
}

/// Serializable descriptor; resolvent kernels are resolved against the model
/// (its effective diffusion) at registration time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ObservableSpec {
    GaussianBump { center: Vec<f64>, width: f64 },
    Constant { value: f64 },
    WeightedPoly { axis: usize, coeffs: [f64; 3], a: f64 },
    CompactBump { center: Vec<f64>, radius: f64 },
    /// Heat kernel `q_eps(x - .)` of the effective diffusion; the mollified
    /// occupation density integrand.
    HeatKernelAt { x: Vec<f64>, eps: f64 },
    /// `Q^lambda_eps(x - .)`; the Tanaka observable.
    ResolventKernelAt { x: Vec<f64>, lambda: f64, eps: f64 },
}

impl TestFunction {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::GaussianBump { center, width, amplitude } => {
                let r2 = dist_sq(x, center);
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }
            TestFunction::Constant { value } => *value,
            TestFunction::WeightedPoly { axis, coeffs, a } => {
                let xp = x[*axis];
                let poly = coeffs[0] + coeffs[1] * xp + coeffs[2] * xp * xp;
                poly * weight_ia(x, *a)
            }
            TestFunction::CompactBump { center, radius } => {
                let u2 = dist_sq(x, center) / (radius * radius);
                if u2 >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - u2)).exp()
                }
            }
            TestFunction::ResolventKernel { center, table } => {
                let r = dist_sq(x, center).sqrt();
                table.value(r)
            }
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            TestFunction::GaussianBump { center, width, amplitude } => {
                let r2 = dist_sq(x, center);
                let v = amplitude * (-r2 / (2.0 * width * width)).exp();
                let s = -1.0 / (width * width);
                for (o, (xi, ci)) in out.iter_mut().zip(x.iter().zip(center)) {
                    *o = s * (xi - ci) * v;
                }
            }
            TestFunction::Constant { .. } => out.fill(0.0),
            TestFunction::WeightedPoly { axis, coeffs, a } => {
                let xp = x[*axis];
                let poly = coeffs[0] + coeffs[1] * xp + coeffs[2] * xp * xp;
                let dpoly = coeffs[1] + 2.0 * coeffs[2] * xp;
                let ia = weight_ia(x, *a);
                let ia2 = weight_ia(x, *a + 2.0);
                for (q, o) in out.iter_mut().enumerate() {
                    let dia = -a * x[q] * ia2;
                    *o = poly * dia + if q == *axis { dpoly * ia } else { 0.0 };
                }
            }
            TestFunction::CompactBump { center, radius } => {
                let r2 = dist_sq(x, center);
                let u2 = r2 / (radius * radius);
                if u2 >= 1.0 {
                    out.fill(0.0);
                    return;
                }
                // f(r) = exp(g(u)), u = r/R; grad = f g'(u) (x-c) / (R r) and
                // g'(u)/u stays finite at 0, so work with g'(u)/u directly:
                // grad = f * (g'(u)/u) * (x-c) / R^2.
                let one = 1.0 - u2;
                let gprime_over_u = -2.0 / (one * one);
                let f = (1.0 - 1.0 / one).exp();
                let s = f * gprime_over_u / (radius * radius);
                for (o, (xi, ci)) in out.iter_mut().zip(x.iter().zip(center)) {
                    *o = s * (xi - ci);
                }
            }
            TestFunction::ResolventKernel { center, table } => {
                let r2 = dist_sq(x, center);
                let r = r2.sqrt();
                if r < 1e-14 {
                    out.fill(0.0);
                    return;
                }
                let dv = table.derivative(r);
                for (o, (xi, ci)) in out.iter_mut().zip(x.iter().zip(center)) {
                    *o = dv * (xi - ci) / r;
                }
            }
        }
    }

    /// Hessian in row-major order into `out` (length d*d).
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            TestFunction::GaussianBump { center, width, amplitude } => {
                let w2 = width * width;
                let r2 = dist_sq(x, center);
                let v = amplitude * (-r2 / (2.0 * w2)).exp();
                for p in 0..d {
                    let dp = x[p] - center[p];
                    for q in 0..d {
                        let dq = x[q] - center[q];
                        let mut h = dp * dq / (w2 * w2);
                        if p == q {
                            h -= 1.0 / w2;
                        }
                        out[p * d + q] = h * v;
                    }
                }
            }
            TestFunction::Constant { .. } => out.fill(0.0),
            TestFunction::WeightedPoly { axis, coeffs, a } => {
                let xp = x[*axis];
                let poly = coeffs[0] + coeffs[1] * xp + coeffs[2] * xp * xp;
                let dpoly = coeffs[1] + 2.0 * coeffs[2] * xp;
                let ddpoly = 2.0 * coeffs[2];
                let ia = weight_ia(x, *a);
                let ia2 = weight_ia(x, *a + 2.0);
                let ia4 = weight_ia(x, *a + 4.0);
                let p_ax = *axis;
                for p in 0..d {
                    for q in 0..d {
                        let dia_p = -a * x[p] * ia2;
                        let dia_q = -a * x[q] * ia2;
                        let mut ddia = a * (a + 2.0) * x[p] * x[q] * ia4;
                        if p == q {
                            ddia -= a * ia2;
                        }
                        let mut h = poly * ddia;
                        if p == p_ax {
                            h += dpoly * dia_q;
                        }
                        if q == p_ax {
                            h += dpoly * dia_p;
                        }
                        if p == p_ax && q == p_ax {
                            h += ddpoly * ia;
                        }
                        out[p * d + q] = h;
                    }
                }
            }
            TestFunction::CompactBump { center, radius } => {
                let rr = radius * radius;
                let r2 = dist_sq(x, center);
                let u2 = r2 / rr;
                if u2 >= 1.0 {
                    out.fill(0.0);
                    return;
                }
                let one = 1.0 - u2;
                let f = (1.0 - 1.0 / one).exp();
                let gp_over_u = -2.0 / (one * one);
                let gpp = (-2.0 - 6.0 * u2) / (one * one * one);
                let gp = gp_over_u * u2.sqrt();
                // Hessian of f(|y|/R): with e = (x-c)/r,
                //   H = (f''(r)) e e' + (f'(r)/r) (I - e e')
                // where f'(r)/r = f gp_over_u / R^2 and
                // f''(r) = f [gpp/R^2 + gp^2/R^2] (chain rule in u).
                let fp_over_r = f * gp_over_u / rr;
                let fpp = f * (gpp + gp * gp) / rr;
                if r2 < 1e-28 {
                    for p in 0..d {
                        for q in 0..d {
                            out[p * d + q] = if p == q { f * gpp / rr } else { 0.0 };
                        }
                    }
                    return;
                }
                for p in 0..d {
                    let ep = (x[p] - center[p]) / r2.sqrt();
                    for q in 0..d {
                        let eq = (x[q] - center[q]) / r2.sqrt();
                        let mut h = fpp * ep * eq;
                        if p == q {
                            h += fp_over_r * (1.0 - ep * eq);
                        } else {
                            h -= fp_over_r * ep * eq;
                        }
                        out[p * d + q] = h;
                    }
                }
            }
            TestFunction::ResolventKernel { center, table } => {
                let r2 = dist_sq(x, center);
                let r = r2.sqrt();
                if r < 1e-12 {
                    let fpp = table.second_derivative(1e-12);
                    for p in 0..d {
                        for q in 0..d {
                            out[p * d + q] = if p == q { fpp } else { 0.0 };
                        }
                    }
                    return;
                }
                let fp = table.derivative(r);
                let fpp = table.second_derivative(r);
                for p in 0..d {
                    let ep = (x[p] - center[p]) / r;
                    for q in 0..d {
                        let eq = (x[q] - center[q]) / r;
                        let mut h = fpp * ep * eq;
                        if p == q {
                            h += (fp / r) * (1.0 - ep * eq);
                        } else {
                            h -= (fp / r) * ep * eq;
                        }
                        out[p * d + q] = h;
                    }
                }
            }
        }
    }

    /// Whether the gradient is identically zero (lets the stepper skip the
    /// common-noise accumulation entirely).
    pub fn gradient_is_zero(&self) -> bool {
        matches!(self, TestFunction::Constant { .. })
    }
}

fn dist_sq(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn weight_ia(x: &[f64], a: f64) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (1.0 + r2).powf(-a / 2.0)
}

/// Central finite-difference consistency check of gradient and Hessian;
/// returns the worst relative mismatch over both.
pub fn finite_difference_gap(f: &TestFunction, x: &[f64], h: f64) -> f64 {
    let d = x.len();
    let mut grad = vec![0.0; d];
    f.gradient(x, &mut grad);
    let mut hess = vec![0.0; d * d];
    f.hessian(x, &mut hess);
    let mut worst: f64 = 0.0;
    let scale = 1.0 + f.value(x).abs();
    let mut xp = x.to_vec();
    for p in 0..d {
        xp.copy_from_slice(x);
        xp[p] = x[p] + h;
        let fp = f.value(&xp);
        xp[p] = x[p] - h;
        let fm = f.value(&xp);
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - grad[p]).abs() / scale);
        for q in 0..d {
            xp.copy_from_slice(x);
            xp[p] += h;
            xp[q] += h;
            let fpp = f.value(&xp);
            xp.copy_from_slice(x);
            xp[p] += h;
            xp[q] -= h;
            let fpm = f.value(&xp);
            xp.copy_from_slice(x);
            xp[p] -= h;
            xp[q] += h;
            let fmp = f.value(&xp);
            xp.copy_from_slice(x);
            xp[p] -= h;
            xp[q] -= h;
            let fmm = f.value(&xp);
            let fd2 = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            worst = worst.max((fd2 - hess[p * d + q]).abs() / scale);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families_1d() -> Vec<TestFunction> {
        vec![
            TestFunction::GaussianBump { center: vec![0.3], width: 1.0, amplitude: 1.0 },
            TestFunction::Constant { value: 2.0 },
            TestFunction::WeightedPoly { axis: 0, coeffs: [1.0, -0.5, 0.25], a: 3.0 },
            TestFunction::CompactBump { center: vec![0.0], radius: 3.0 },
        ]
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let points = [[-1.7], [0.0], [0.4], [2.2]];
        for f in families_1d() {
            for x in &points {
                let gap = finite_difference_gap(&f, x, 1e-4);
                assert!(gap < 1e-5, "{f:?} at {x:?}: gap {gap}");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences_2d() {
        let fs = vec![
            TestFunction::GaussianBump { center: vec![0.1, -0.4], width: 0.8, amplitude: 2.0 },
            TestFunction::WeightedPoly { axis: 1, coeffs: [0.5, 1.0, 0.0], a: 4.0 },
            TestFunction::CompactBump { center: vec![0.0, 0.0], radius: 2.0 },
        ];
        for f in fs {
            for x in [[0.3, 0.4], [-0.9, 1.1]] {
                let gap = finite_difference_gap(&f, &x, 1e-4);
                assert!(gap < 1e-5, "{f:?} at {x:?}: gap {gap}");
            }
        }
    }

    #[test]
    fn compact_bump_support() {
        let f = TestFunction::CompactBump { center: vec![0.0], radius: 2.0 };
        assert_eq!(f.value(&[2.0]), 0.0);
        assert_eq!(f.value(&[5.0]), 0.0);
        assert!((f.value(&[0.0]) - 1.0).abs() < 1e-15);
        let mut g = [0.0];
        f.gradient(&[2.5], &mut g);
        assert_eq!(g[0], 0.0);
    }
}
