//! Model coefficients for a superprocess with dependent spatial motion.
//!
//! A model is the tuple `(d, c, h, gamma, offspring law)`. The individual
//! diffusion coefficient `c` and the random-medium intensity `h` come from
//! small named families so that the interaction covariance
//!
//! ```text
//! rho_pq(z) = int h_p(u) h_q(u - z) du
//! ```
//!
//! is available both in closed form (Gaussian medium) and by quadrature, and
//! the `dm x dm` diffusion matrix of the m-particle motion,
//! `Gamma[i,j] = a(x_i) + rho(0)` on the diagonal and `rho(x_i - x_j)` off
//! it, can be assembled and checked for uniform ellipticity.

use crate::error::{Result, SdsmError};
use crate::quad;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Eigenvalues in `[PSD_CLAMP_FLOOR, 0)` are treated as quadrature noise and
/// clamped to zero before factorization; anything more negative is an error.
pub const PSD_CLAMP_FLOOR: f64 = -1e-10;

/// Individual diffusion coefficient family: `c(x)`, a `d x d` matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CFamily {
    /// `c(x) = value * I`.
    ConstantC { value: f64 },
}

impl CFamily {
    /// `a(x) = c(x) c(x)^T` as a scalar multiple of the identity.
    pub fn a_scalar(&self) -> f64 {
        match self {
            CFamily::ConstantC { value } => value * value,
        }
    }

    pub fn c_scalar(&self) -> f64 {
        match self {
            CFamily::ConstantC { value } => *value,
        }
    }
}

/// Random-medium intensity family: `h(x)`, a vector of `d` functions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum HFamily {
    /// `h == 0`: no common medium (Dawson-Watanabe branching motion).
    ZeroH,
    /// `h_p(u) = amplitude[p] * exp(-|u|^2 / (2 scale^2))`.
    ///
    /// All components share one radial profile, so the medium enters through
    /// a single scalar Gaussian field; `rho_pq(z)` has the closed form
    /// `amplitude[p] * amplitude[q] * (pi scale^2)^{d/2} * exp(-|z|^2/(4 scale^2))`.
    GaussianH { amplitude: Vec<f64>, scale: f64 },
}

/// Critical offspring distribution with finite support. Serializes as the
/// bare probability vector; deserialization re-runs the criticality checks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OffspringLaw {
    /// `probs[k]` is the probability of k offspring.
    pub probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl TryFrom<Vec<f64>> for OffspringLaw {
    type Error = String;
    fn try_from(probs: Vec<f64>) -> std::result::Result<Self, String> {
        OffspringLaw::new(probs).map_err(|e| e.to_string())
    }
}

impl From<OffspringLaw> for Vec<f64> {
    fn from(law: OffspringLaw) -> Self {
        law.probs
    }
}

impl OffspringLaw {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SdsmError::InvalidModel(format!(
                "offspring probabilities sum to {sum}, expected 1"
            )));
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(SdsmError::InvalidModel("negative offspring probability".into()));
        }
        if probs.len() > 1 && probs[1] != 0.0 {
            return Err(SdsmError::InvalidModel(
                "offspring law must have p_1 = 0".into(),
            ));
        }
        let mean: f64 = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        if (mean - 1.0).abs() > 1e-12 {
            return Err(SdsmError::InvalidModel(format!(
                "offspring mean is {mean}, criticality requires 1"
            )));
        }
        let m2: f64 = probs.iter().enumerate().map(|(k, p)| (k * k) as f64 * p).sum();
        if m2 - 1.0 <= 0.0 {
            return Err(SdsmError::InvalidModel(
                "offspring variance must be positive".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        Ok(Self { probs, cumulative })
    }

    /// Critical binary branching: half death, half split in two.
    pub fn critical_binary() -> Self {
        Self::new(vec![0.5, 0.0, 0.5]).unwrap()
    }

    /// Diagnostic constructor that skips the criticality checks (pure-death
    /// laws and deliberately corrupted laws in the validation suite).
    pub fn new_unchecked(probs: Vec<f64>) -> Self {
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        Self { probs, cumulative }
    }

    /// Offspring variance `sigma^2 = m_2 - 1`.
    pub fn sigma_sq(&self) -> f64 {
        let m2: f64 = self.probs.iter().enumerate().map(|(k, p)| (k * k) as f64 * p).sum();
        m2 - 1.0
    }

    /// Draw an offspring count from a uniform variate in `[0,1)`.
    pub fn sample_from_uniform(&self, u: f64) -> usize {
        // Finite support: a linear scan beats a table for the sizes here.
        for (k, &c) in self.cumulative.iter().enumerate() {
            if u < c {
                return k;
            }
        }
        self.cumulative.len() - 1
    }
}

/// One SDSM instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCoefficients {
    pub d: usize,
    pub c: CFamily,
    pub h: HFamily,
    /// Branching-rate constant, per unit time.
    pub gamma: f64,
    pub offspring: OffspringLaw,
    /// When false, `rho` always goes through quadrature (for cross-checks).
    #[serde(default = "default_true")]
    pub use_closed_form_rho: bool,
}

fn default_true() -> bool {
    true
}

impl ModelCoefficients {
    pub fn new(d: usize, c: CFamily, h: HFamily, gamma: f64, offspring: OffspringLaw) -> Result<Self> {
        let model = Self { d, c, h, gamma, offspring, use_closed_form_rho: true };
        model.validate()?;
        Ok(model)
    }

    /// The acceptance-suite reference model: d = 1, c = 1,
    /// `h(u) = (2 pi)^{-1/4} e^{-u^2/4}`, gamma = 1, critical binary
    /// offspring. Then `rho(z) = e^{-z^2/8}` and the effective diffusion is
    /// `sigma_0^2 = a + rho(0) = 2`.
    pub fn reference() -> Self {
        let amp = (2.0 * std::f64::consts::PI).powf(-0.25);
        Self::new(
            1,
            CFamily::ConstantC { value: 1.0 },
            HFamily::GaussianH { amplitude: vec![amp], scale: std::f64::consts::SQRT_2 },
            1.0,
            OffspringLaw::critical_binary(),
        )
        .unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(SdsmError::InvalidModel("dimension must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(SdsmError::InvalidModel("gamma must be nonnegative".into()));
        }
        if let HFamily::GaussianH { amplitude, scale } = &self.h {
            if amplitude.len() != self.d {
                return Err(SdsmError::InvalidModel(format!(
                    "gaussian_h amplitude has {} components, expected d = {}",
                    amplitude.len(),
                    self.d
                )));
            }
            if *scale <= 0.0 {
                return Err(SdsmError::InvalidModel("gaussian_h scale must be positive".into()));
            }
            // h_p must be absolutely integrable; check the quadrature of |h_p|
            // over the truncation box against the closed form.
            let l1_closed =
                (2.0 * std::f64::consts::PI).sqrt().powi(self.d as i32) * scale.powi(self.d as i32);
            for (p, &a) in amplitude.iter().enumerate() {
                let w = *scale;
                let l = self.truncation_half_width(0.0);
                let q = quad::integrate_box(
                    &|u: &[f64]| {
                        let r2: f64 = u.iter().map(|x| x * x).sum();
                        (a * (-r2 / (2.0 * w * w)).exp()).abs()
                    },
                    self.d,
                    l,
                    48,
                );
                let expected = a.abs() * l1_closed;
                if (q - expected).abs() > 1e-6 * (1.0 + expected) {
                    return Err(SdsmError::InvalidModel(format!(
                        "h_{p} fails the integrability check: quadrature {q}, closed form {expected}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Half-width of the quadrature truncation box for integrals of
    /// `h_p(u) h_q(u - z)`; sized so Gaussian tails contribute below 1e-10.
    fn truncation_half_width(&self, z_norm: f64) -> f64 {
        match &self.h {
            HFamily::ZeroH => 1.0,
            // e^{-L^2/(2 w^2)} < 1e-14 needs L > w sqrt(2 * 32.2)
            HFamily::GaussianH { scale, .. } => z_norm + scale * 8.1,
        }
    }

    /// Variance `C(0) = (pi w^2)^{d/2}` of the shared scalar medium field
    /// (unit-amplitude profile).
    pub fn medium_field_variance(&self) -> f64 {
        match &self.h {
            HFamily::ZeroH => 0.0,
            HFamily::GaussianH { scale, .. } => {
                (std::f64::consts::PI * scale * scale).powf(self.d as f64 / 2.0)
            }
        }
    }

    /// Scalar correlation profile of the shared medium field:
    /// `C(z) = Cov(S(x), S(x+z))` with `rho_pq(z) = amp_p amp_q C(z)`.
    pub fn medium_field_correlation(&self, z: &[f64]) -> f64 {
        match &self.h {
            HFamily::ZeroH => 0.0,
            HFamily::GaussianH { scale, .. } => {
                let r2: f64 = z.iter().map(|x| x * x).sum();
                self.medium_field_variance() * (-r2 / (4.0 * scale * scale)).exp()
            }
        }
    }

    pub fn medium_amplitudes(&self) -> Vec<f64> {
        match &self.h {
            HFamily::ZeroH => vec![0.0; self.d],
            HFamily::GaussianH { amplitude, .. } => amplitude.clone(),
        }
    }

    /// The interaction covariance `rho(z)`; closed form when available and
    /// enabled, else tensor-product Gauss-Legendre quadrature on a truncation
    /// box, refined once; refinements differing by more than 1e-7 in max norm
    /// are a quadrature-nonconvergence error.
    pub fn rho(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        assert_eq!(z.len(), self.d);
        match &self.h {
            HFamily::ZeroH => Ok(DMatrix::zeros(self.d, self.d)),
            HFamily::GaussianH { .. } if self.use_closed_form_rho => Ok(self.rho_closed_form(z)),
            HFamily::GaussianH { .. } => {
                let coarse = self.rho_quadrature(z, 48);
                let fine = self.rho_quadrature(z, 72);
                let gap = (&fine - &coarse).abs().max();
                if gap > 1e-7 {
                    return Err(SdsmError::QuadratureNonConvergence {
                        context: format!("rho at z = {z:?}"),
                        last_change: gap,
                    });
                }
                Ok(fine)
            }
        }
    }

    /// Closed-form `rho` for the Gaussian medium family.
    pub fn rho_closed_form(&self, z: &[f64]) -> DMatrix<f64> {
        let c = self.medium_field_correlation(z);
        let amp = self.medium_amplitudes();
        DMatrix::from_fn(self.d, self.d, |p, q| amp[p] * amp[q] * c)
    }

    /// `rho` by tensor-product Gauss-Legendre quadrature of
    /// `int h_p(u) h_q(u - z) du`; the independent route used to verify the
    /// closed form.
    pub fn rho_quadrature(&self, z: &[f64], nodes: usize) -> DMatrix<f64> {
        let d = self.d;
        let znorm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let l = self.truncation_half_width(znorm);
        let h_component = |p: usize, u: &[f64], shift: &[f64]| -> f64 {
            match &self.h {
                HFamily::ZeroH => 0.0,
                HFamily::GaussianH { amplitude, scale } => {
                    let r2: f64 = u.iter().zip(shift).map(|(x, s)| (x - s) * (x - s)).sum();
                    amplitude[p] * (-r2 / (2.0 * scale * scale)).exp()
                }
            }
        };
        let origin = vec![0.0; d];
        DMatrix::from_fn(d, d, |p, q| {
            quad::integrate_box(
                &|u: &[f64]| h_component(p, u, &origin) * h_component(q, u, z),
                d,
                l,
                nodes,
            )
        })
    }

    /// Effective diffusion `sigma_0^2 = a + rho_pp(0)` when it is a scalar
    /// multiple of the identity (constant c, radial h); this is what the
    /// Green-kernel module runs on.
    pub fn sigma0_sq(&self) -> Result<f64> {
        let a = self.c.a_scalar();
        let rho0 = self.rho(&vec![0.0; self.d])?;
        let diag0 = rho0[(0, 0)];
        for p in 0..self.d {
            for q in 0..self.d {
                let expect = if p == q { diag0 } else { 0.0 };
                if (rho0[(p, q)] - expect).abs() > 1e-12 {
                    return Err(SdsmError::InvalidModel(
                        "rho(0) is not a scalar matrix; no scalar effective diffusion".into(),
                    ));
                }
            }
        }
        Ok(a + diag0)
    }
}

/// Dense symmetric `dm x dm` diffusion matrix of the m-particle system,
/// indexed by (particle, coordinate) with coordinate fastest.
#[derive(Debug, Clone)]
pub struct GammaMatrix {
    pub matrix: DMatrix<f64>,
    pub particles: usize,
    pub dim: usize,
}

/// Assemble the m-particle diffusion matrix: diagonal blocks
/// `a(x_i) + rho(0)`, off-diagonal blocks `rho(x_i - x_j)`.
pub fn assemble_gamma(model: &ModelCoefficients, positions: &[f64]) -> Result<GammaMatrix> {
    let d = model.d;
    assert!(!positions.is_empty() && positions.len() % d == 0);
    let m = positions.len() / d;
    let a = model.c.a_scalar();
    let mut matrix = DMatrix::zeros(d * m, d * m);
    let mut diff = vec![0.0; d];
    for i in 0..m {
        for j in i..m {
            for (k, dk) in diff.iter_mut().enumerate() {
                *dk = positions[i * d + k] - positions[j * d + k];
            }
            let block = model.rho(&diff)?;
            for p in 0..d {
                for q in 0..d {
                    let mut v = block[(p, q)];
                    if i == j && p == q {
                        v += a;
                    }
                    matrix[(i * d + p, j * d + q)] = v;
                    matrix[(j * d + q, i * d + p)] = v;
                }
            }
        }
    }
    Ok(GammaMatrix { matrix, particles: m, dim: d })
}

/// Extreme eigenvalues of the m-particle diffusion matrix. A nonpositive
/// smallest eigenvalue breaks uniform ellipticity and the simulation refuses
/// to start.
pub fn check_ellipticity(model: &ModelCoefficients, positions: &[f64]) -> Result<(f64, f64)> {
    let gamma = assemble_gamma(model, positions)?;
    let size = gamma.matrix.nrows();
    let eigen = gamma.matrix.symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &e in eigen.eigenvalues.iter() {
        lo = lo.min(e);
        hi = hi.max(e);
    }
    if lo <= 0.0 {
        return Err(SdsmError::EllipticityViolation { lambda_min: lo, size });
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent quadrature oracle for `rho` of the reference model:
    /// plain midpoint rule, no shared code with the implementation path.
    fn rho_ref_oracle(z: f64) -> f64 {
        let amp = (2.0 * std::f64::consts::PI).powf(-0.25);
        let h = |u: f64| amp * (-u * u / 4.0).exp();
        let n = 400_000;
        let (lo, hi) = (-30.0, 30.0);
        let dx = (hi - lo) / n as f64;
        let mut sum = 0.0;
        for i in 0..n {
            let u = lo + (i as f64 + 0.5) * dx;
            sum += h(u) * h(u - z);
        }
        sum * dx
    }

    #[test]
    fn reference_rho_matches_gaussian_identity() {
        // Oracle evaluated first; the closed form is e^{-z^2/8}.
        let model = ModelCoefficients::reference();
        for z in [0.0, 0.7, 2.0, -3.1] {
            let oracle = rho_ref_oracle(z);
            let closed = model.rho(&[z]).unwrap()[(0, 0)];
            assert!(
                (closed - oracle).abs() < 1e-9,
                "z = {z}: closed {closed}, oracle {oracle}"
            );
            assert!((closed - (-z * z / 8.0).exp()).abs() < 1e-12);
        }
        assert!((model.rho(&[0.0]).unwrap()[(0, 0)] - 1.0).abs() < 1e-12);
        let r2 = model.rho(&[2.0]).unwrap()[(0, 0)];
        assert!((r2 - (-0.5f64).exp()).abs() < 1e-12);
        assert!((r2 - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn zero_h_gives_zero_rho() {
        let model = ModelCoefficients::new(
            2,
            CFamily::ConstantC { value: 1.0 },
            HFamily::ZeroH,
            1.0,
            OffspringLaw::critical_binary(),
        )
        .unwrap();
        let rho = model.rho(&[0.4, -1.0]).unwrap();
        assert!(rho.abs().max() == 0.0);
    }

    #[test]
    fn quadrature_route_agrees_with_closed_form() {
        let mut model = ModelCoefficients::reference();
        model.use_closed_form_rho = false;
        for z in [0.0, 1.3, 2.0] {
            let q = model.rho(&[z]).unwrap()[(0, 0)];
            assert!((q - (-z * z / 8.0).exp()).abs() < 1e-8, "z = {z}: {q}");
        }
    }

    #[test]
    fn rho_symmetry_under_reflection() {
        // rho(z) = rho(-z)^T for the matrix-valued covariance.
        let model = ModelCoefficients::new(
            2,
            CFamily::ConstantC { value: 0.5 },
            HFamily::GaussianH { amplitude: vec![0.3, 0.9], scale: 1.1 },
            1.0,
            OffspringLaw::critical_binary(),
        )
        .unwrap();
        for z in [[0.3, -0.8], [1.0, 0.0], [-0.4, 0.4]] {
            let fwd = model.rho(&z).unwrap();
            let bwd = model.rho(&[-z[0], -z[1]]).unwrap();
            assert!((fwd - bwd.transpose()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn gamma_single_particle_reference() {
        // a + rho(0) = 1 + 1 = 2 for the reference model.
        let model = ModelCoefficients::reference();
        let g = assemble_gamma(&model, &[0.0]).unwrap();
        assert_eq!(g.matrix.nrows(), 1);
        assert!((g.matrix[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_two_particles_reference() {
        let model = ModelCoefficients::reference();
        let g = assemble_gamma(&model, &[0.0, 2.0]).unwrap();
        let e = (-0.5f64).exp();
        assert!((g.matrix[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((g.matrix[(1, 1)] - 2.0).abs() < 1e-12);
        assert!((g.matrix[(0, 1)] - e).abs() < 1e-12);
        assert!((g.matrix[(1, 0)] - e).abs() < 1e-12);
    }

    #[test]
    fn gamma_off_diagonal_zero_without_medium() {
        let model = ModelCoefficients::new(
            1,
            CFamily::ConstantC { value: 1.0 },
            HFamily::ZeroH,
            1.0,
            OffspringLaw::critical_binary(),
        )
        .unwrap();
        let g = assemble_gamma(&model, &[0.7, 0.7]).unwrap();
        assert_eq!(g.matrix[(0, 1)], 0.0);
    }

    #[test]
    fn ellipticity_reference_cases() {
        let model = ModelCoefficients::reference();
        let (lo, hi) = check_ellipticity(&model, &[0.3]).unwrap();
        assert!((lo - 2.0).abs() < 1e-12 && (hi - 2.0).abs() < 1e-12);

        // Two particles at distance 2: spectrum 2 +- e^{-1/2}.
        let (lo, hi) = check_ellipticity(&model, &[0.0, 2.0]).unwrap();
        let e = (-0.5f64).exp();
        assert!((lo - (2.0 - e)).abs() < 1e-10);
        assert!((hi - (2.0 + e)).abs() < 1e-10);
    }

    #[test]
    fn degenerate_model_rejected() {
        let model = ModelCoefficients::new(
            1,
            CFamily::ConstantC { value: 0.0 },
            HFamily::ZeroH,
            1.0,
            OffspringLaw::critical_binary(),
        )
        .unwrap();
        let err = check_ellipticity(&model, &[0.0, 1.0]).unwrap_err();
        assert!(matches!(err, SdsmError::EllipticityViolation { .. }));
    }

    #[test]
    fn quadratic_form_decomposition() {
        // xi' Gamma xi = sum_i |c(x_i)' xi_i|^2 + int |sum_i sum_p xi_ip h_p(u - x_i)|^2 du
        let model = ModelCoefficients::reference();
        let positions = [0.0, 1.5, -0.7];
        let g = assemble_gamma(&model, &positions).unwrap();
        let xi = [0.8, -0.3, 0.5];
        let mut lhs = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                lhs += xi[i] * g.matrix[(i, j)] * xi[j];
            }
        }
        let amp = (2.0 * std::f64::consts::PI).powf(-0.25);
        let individual: f64 = xi.iter().map(|x| x * x).sum(); // c = 1
        let medium = quad::integrate_panels(
            &|u: f64| {
                let s: f64 = (0..3)
                    .map(|i| xi[i] * amp * (-(u - positions[i]).powi(2) / 4.0).exp())
                    .sum();
                s * s
            },
            -40.0,
            40.0,
            40,
            32,
        );
        let rhs = individual + medium;
        assert!(
            (lhs - rhs).abs() < 1e-6 * (1.0 + rhs.abs()),
            "lhs {lhs} rhs {rhs}"
        );
        assert!(lhs >= 0.0);
    }

    #[test]
    fn offspring_law_validation() {
        assert!(OffspringLaw::new(vec![0.2, 0.2, 0.6]).is_err()); // p1 != 0
        assert!(OffspringLaw::new(vec![0.5, 0.0, 0.4]).is_err()); // not normalized
        assert!(OffspringLaw::new(vec![0.4, 0.0, 0.6]).is_err()); // mean != 1
        assert!(OffspringLaw::new(vec![0.0, 0.0, 0.0, 0.0]).is_err());
        // Critical with wider support: p0 = 2/3, p3 = 1/3 has mean 1.
        let wide = OffspringLaw::new(vec![2.0 / 3.0, 0.0, 0.0, 1.0 / 3.0]).unwrap();
        assert!((wide.sigma_sq() - 2.0).abs() < 1e-12);
        let binary = OffspringLaw::critical_binary();
        assert!((binary.sigma_sq() - 1.0).abs() < 1e-14);
        assert_eq!(binary.sample_from_uniform(0.1), 0);
        assert_eq!(binary.sample_from_uniform(0.9), 2);
    }
}
