//! Gauss-Legendre quadrature and the adaptive Laplace-transform integrals
//! used by the kernel and interaction-covariance computations.

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
///
/// Computed by Newton iteration on the Legendre polynomial `P_n`; accurate to
/// machine precision for the orders used here (n <= 256).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            dp = (n as f64) * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        // For odd n the midpoint is exact; recompute its weight cleanly.
        let mut p0 = 1.0;
        let mut p1 = 0.0;
        for k in 2..=n {
            let kf = k as f64;
            let p2 = (-(kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let dp = (n as f64) * (0.0 * p1 - p0) / (0.0 - 1.0);
        nodes[n / 2] = 0.0;
        weights[n / 2] = 2.0 / (dp * dp);
    }
    (nodes, weights)
}

/// Integrate `f` over `[a, b]` with an `n`-point Gauss-Legendre rule.
pub fn integrate_gl<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let c = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut sum = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        sum += w * f(mid + c * x);
    }
    c * sum
}

/// Integrate `f` over `[a, b]` split into `panels` equal panels, `n` nodes each.
pub fn integrate_panels<F: Fn(f64) -> f64 + ?Sized>(
    f: &F,
    a: f64,
    b: f64,
    panels: usize,
    n: usize,
) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let c = 0.5 * h;
        let mid = lo + c;
        let mut sum = 0.0;
        for (x, w) in nodes.iter().zip(&weights) {
            sum += w * f(mid + c * x);
        }
        total += c * sum;
    }
    total
}

/// Outcome of a self-refining quadrature: the value and the last refinement gap.
#[derive(Debug, Clone, Copy)]
pub struct Refined {
    pub value: f64,
    pub last_change: f64,
    pub converged: bool,
}

/// Refine `eval(level)` by doubling `level` until the relative change drops
/// below `rtol` (or `max_level` is hit).
pub fn refine_to<F: Fn(usize) -> f64>(eval: F, rtol: f64, max_level: usize) -> Refined {
    let mut prev = eval(0);
    let mut last_change = f64::INFINITY;
    for level in 1..=max_level {
        let cur = eval(level);
        let scale = cur.abs().max(prev.abs()).max(1e-300);
        last_change = (cur - prev).abs() / scale;
        prev = cur;
        if last_change < rtol {
            return Refined { value: cur, last_change, converged: true };
        }
    }
    Refined { value: prev, last_change, converged: false }
}

/// Laplace-transform integral `int_eps^inf e^{-lambda t} f(t) dt`.
///
/// The range is split as `[eps, 1] ∪ [1, inf)`, with the substitution
/// `t = e^u` on the tail so the integrand decays doubly exponentially.
/// The node count doubles per refinement level until the result is stable
/// to `rtol` relative.
pub fn laplace_tail<F: Fn(f64) -> f64>(f: &F, eps: f64, lambda: f64, rtol: f64) -> Refined {
    assert!(lambda > 0.0);
    // Truncate the tail where e^{-lambda t} falls below 1e-320 of the peak.
    let t_max = (740.0 / lambda).max(2.0);
    let u_max = t_max.ln();
    let eval = |level: usize| {
        let n = 32 << level.min(4);
        let panels = 1 + level.saturating_sub(4);
        let mut total = 0.0;
        if eps < 1.0 {
            total += integrate_panels(
                &|t: f64| (-lambda * t).exp() * f(t),
                eps,
                1.0,
                2 * panels,
                n,
            );
        }
        let lo = eps.max(1.0);
        let u_lo = lo.ln();
        total += integrate_panels(
            &|u: f64| {
                let t = u.exp();
                (-lambda * t).exp() * f(t) * t
            },
            u_lo,
            u_max,
            2 * panels,
            n,
        );
        total
    };
    refine_to(eval, rtol, 8)
}

/// Integral over `[0, inf)` of `e^{-lambda s} g(s)` where `g` may carry an
/// integrable singularity at `s = 0` (up to `s^{-1/2}` or `log s`).
///
/// Uses the substitution `s = q^2` near the origin, which removes a
/// square-root singularity and softens a logarithmic one, plus geometric
/// panels toward zero.
pub fn exp_weighted_singular<F: Fn(f64) -> f64>(g: &F, lambda: f64, rtol: f64) -> Refined {
    assert!(lambda > 0.0);
    let s_max = (740.0 / lambda).max(2.0);
    let eval = |level: usize| {
        let n = 24 << level.min(3);
        let geo = 10 + 4 * level;
        // [0,1] via s = q^2 with geometric panels toward q = 0.
        let mut total = 0.0;
        let mut hi: f64 = 1.0;
        for _ in 0..geo {
            let lo = hi * 0.5;
            total += integrate_gl(
                |q: f64| {
                    let s = q * q;
                    2.0 * q * (-lambda * s).exp() * g(s)
                },
                lo,
                hi,
                n,
            );
            hi = lo;
        }
        total += integrate_gl(
            |q: f64| {
                let s = q * q;
                2.0 * q * (-lambda * s).exp() * g(s)
            },
            0.0,
            hi,
            n,
        );
        // [1, s_max] in log variable.
        total += integrate_panels(
            &|u: f64| {
                let s = u.exp();
                (-lambda * s).exp() * g(s) * s
            },
            0.0,
            s_max.ln(),
            4 + level,
            n,
        );
        total
    };
    refine_to(eval, rtol, 7)
}

/// Tensor-product Gauss-Legendre integral of `f` over the box `[-l, l]^dim`.
pub fn integrate_box<F: Fn(&[f64]) -> f64>(f: &F, dim: usize, l: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let mut point = vec![0.0; dim];
    fn recurse<F: Fn(&[f64]) -> f64>(
        f: &F,
        nodes: &[f64],
        weights: &[f64],
        l: f64,
        point: &mut [f64],
        axis: usize,
    ) -> f64 {
        let dim = point.len();
        let mut sum = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            point[axis] = l * x;
            let inner = if axis + 1 == dim {
                f(point)
            } else {
                recurse(f, nodes, weights, l, point, axis + 1)
            };
            sum += w * inner;
        }
        l * sum
    }
    recurse(f, &nodes, &weights, l, &mut point, 0)
}
