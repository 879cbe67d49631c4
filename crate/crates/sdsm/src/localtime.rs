//! Local-time estimation through the mollified occupation density and the
//! pathwise Tanaka decomposition.
//!
//! The approximant at level `eps` is
//!
//! ```text
//! Lambda^{x,eps}_t = int_0^t < q_eps(x - .), mu_s > ds
//! ```
//!
//! which, by the resolvent identity `(lambda - G_1) Q^lambda_eps = q_eps`,
//! coincides with the `lambda`-form `int_0^t <(lambda - G_1) Q^lambda_eps(x - .), mu_s> ds`
//! for every `lambda > 0`; both routes are evaluated and their gap reported.
//! The Tanaka side assembles the kernel masses at the endpoints, the
//! `lambda`-integral and the two stochastic-integral terms of the registered
//! observable `psi(z) = Q^lambda_eps(x - z)`, plus the finite-system
//! individual-Brownian term, which only vanishes in the scaling limit and is
//! therefore carried separately rather than folded into the limit identity.

use crate::error::{Result, SdsmError};
use crate::green::{KernelSpec, ResolventFormTable};
use crate::model::ModelCoefficients;
use crate::particles::PathRecord;
use crate::testfn::TestFunction;
use serde::{Deserialize, Serialize};

/// Both evaluations of `Lambda^{x,eps}_t` from stride-1 snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTimeRoutes {
    /// Trapezoidal integral of `<q_eps(x - .), mu_s>`.
    pub mollified: f64,
    /// Trapezoidal integral of `<(lambda - G_1) Q^lambda_eps(x - .), mu_s>`.
    pub resolvent_form: f64,
    pub difference: f64,
}

/// The mollified-occupation value and the Tanaka right-hand side of one
/// path at one evaluation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTimeEstimate {
    pub x: Vec<f64>,
    pub t: f64,
    pub eps: f64,
    pub lambda: f64,
    /// `Lambda^{x,eps}_t`, the mollified occupation integral.
    pub value: f64,
    /// `<psi, mu_0>`.
    pub initial_kernel_mass: f64,
    /// `<psi, mu_t>`.
    pub terminal_kernel_mass: f64,
    /// `lambda int_0^t <psi, mu_s> ds`.
    pub lambda_integral: f64,
    /// Common-noise stochastic integral `X_t(psi)`.
    pub common_noise_term: f64,
    /// Branching stochastic integral `M_t(psi)`.
    pub branching_term: f64,
    /// Individual-Brownian martingale `I_t(psi)`: the `theta^{-n/2}`-scale
    /// finite-system term absent from the limit identity.
    pub individual_term: f64,
}

impl LocalTimeEstimate {
    /// The five-term Tanaka right-hand side of the limit identity.
    pub fn tanaka_rhs(&self) -> f64 {
        self.initial_kernel_mass - self.terminal_kernel_mass
            + self.lambda_integral
            + self.common_noise_term
            + self.branching_term
    }

    /// Right-hand side including the finite-system Brownian correction.
    pub fn tanaka_rhs_corrected(&self) -> f64 {
        self.tanaka_rhs() + self.individual_term
    }

    /// Pathwise residual against the corrected (finite-system) identity;
    /// decays with the step size.
    pub fn residual(&self) -> f64 {
        (self.value - self.tanaka_rhs_corrected()).abs()
    }

    /// Residual against the limit identity; floors at the size of the
    /// individual-Brownian term.
    pub fn residual_limit_form(&self) -> f64 {
        (self.value - self.tanaka_rhs()).abs()
    }
}

fn ensure_dim(d: usize) -> Result<()> {
    if d > 3 {
        return Err(SdsmError::DimensionUnsupported(d));
    }
    Ok(())
}

/// `<q_eps(x - .), mu>` for one snapshot.
fn mollified_mass(positions: &[f64], dim: usize, mass: f64, x: &[f64], norm: f64, denom: f64) -> f64 {
    let mut acc = 0.0;
    let m = positions.len() / dim;
    for k in 0..m {
        let mut r2 = 0.0;
        for p in 0..dim {
            let diff = x[p] - positions[k * dim + p];
            r2 += diff * diff;
        }
        acc += (-r2 / denom).exp();
    }
    acc * mass * norm
}

/// Trapezoid over the snapshot times of a per-snapshot integrand.
fn trapezoid_over_snapshots<F: Fn(&[f64]) -> f64>(record: &PathRecord, f: F) -> f64 {
    let snaps = &record.snapshots;
    if snaps.len() < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut prev_val = f(&snaps[0].positions);
    for w in snaps.windows(2) {
        let cur = f(&w[1].positions);
        acc += 0.5 * (prev_val + cur) * (w[1].time - w[0].time);
        prev_val = cur;
    }
    acc
}

/// Both evaluations of the local-time approximant at `x` from a record with
/// stride-1 snapshots. `d <= 3` only.
pub fn local_time(
    record: &PathRecord,
    model: &ModelCoefficients,
    x: &[f64],
    eps: f64,
    lambda: f64,
) -> Result<LocalTimeRoutes> {
    ensure_dim(record.dim)?;
    if eps <= 0.0 {
        return Err(SdsmError::Config("local time needs eps > 0".into()));
    }
    if record.snapshots.len() < 2 && !record.snapshots.is_empty() {
        // Degenerate horizon: zero by convention.
        return Ok(LocalTimeRoutes { mollified: 0.0, resolvent_form: 0.0, difference: 0.0 });
    }
    let sigma_sq = model.sigma0_sq()?;
    let d = record.dim;
    let v = sigma_sq * eps;
    let norm = (2.0 * std::f64::consts::PI * v).powf(-(d as f64) / 2.0);
    let denom = 2.0 * v;
    let mass = record.mass;
    let mollified =
        trapezoid_over_snapshots(record, |pos| mollified_mass(pos, d, mass, x, norm, denom));
    let spec = KernelSpec::new(lambda, eps, sigma_sq, d)?;
    let table = ResolventFormTable::build(&spec, table_reach(record, x), 2e-3)?;
    let resolvent_form = trapezoid_over_snapshots(record, |pos| {
        let m = pos.len() / d;
        let mut acc = 0.0;
        for k in 0..m {
            let mut r2 = 0.0;
            for p in 0..d {
                let diff = x[p] - pos[k * d + p];
                r2 += diff * diff;
            }
            acc += table.value(r2.sqrt());
        }
        acc * mass
    });
    Ok(LocalTimeRoutes {
        mollified,
        resolvent_form,
        difference: (mollified - resolvent_form).abs(),
    })
}

/// Running `t -> Lambda^{x,eps}_t` along the snapshot grid.
pub fn mollified_series(
    record: &PathRecord,
    model: &ModelCoefficients,
    x: &[f64],
    eps: f64,
) -> Result<Vec<(f64, f64)>> {
    ensure_dim(record.dim)?;
    let sigma_sq = model.sigma0_sq()?;
    let d = record.dim;
    let v = sigma_sq * eps;
    let norm = (2.0 * std::f64::consts::PI * v).powf(-(d as f64) / 2.0);
    let denom = 2.0 * v;
    let mut out = Vec::with_capacity(record.snapshots.len());
    let mut acc = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for snap in &record.snapshots {
        let val = mollified_mass(&snap.positions, d, record.mass, x, norm, denom);
        if let Some((pt, pv)) = prev {
            acc += 0.5 * (pv + val) * (snap.time - pt);
        }
        prev = Some((snap.time, val));
        out.push((snap.time, acc));
    }
    Ok(out)
}

fn table_reach(record: &PathRecord, x: &[f64]) -> f64 {
    let mut reach: f64 = 4.0;
    for snap in &record.snapshots {
        let m = snap.positions.len() / record.dim;
        for k in 0..m {
            let mut r2 = 0.0;
            for p in 0..record.dim {
                let diff = x[p] - snap.positions[k * record.dim + p];
                r2 += diff * diff;
            }
            reach = reach.max(r2.sqrt());
        }
    }
    reach + 1.0
}

/// Assemble the Tanaka decomposition from a run that registered
/// `psi(z) = Q^lambda_eps(x - z)` (id `psi_id`) before simulation, plus the
/// mollified-occupation observable `q_eps(x - .)` (id `qeps_id`).
pub fn tanaka_estimate(
    record: &PathRecord,
    x: &[f64],
    eps: f64,
    lambda: f64,
    psi_id: &str,
    qeps_id: &str,
) -> Result<LocalTimeEstimate> {
    ensure_dim(record.dim)?;
    let psi = record.series_for(psi_id)?;
    let qeps = record.series_for(qeps_id)?;
    let first = &psi.points[0];
    let last = psi.last();
    Ok(LocalTimeEstimate {
        x: x.to_vec(),
        t: last.time,
        eps,
        lambda,
        value: qeps.last().occ_trap,
        initial_kernel_mass: first.value,
        terminal_kernel_mass: last.value,
        lambda_integral: lambda * last.occ_trap,
        common_noise_term: last.x_mart,
        branching_term: last.m_mart,
        individual_term: last.i_mart,
    })
}

/// `|Lambda^{x,eps}_t - tanaka_rhs|` with the finite-system correction.
pub fn tanaka_residual(
    record: &PathRecord,
    x: &[f64],
    eps: f64,
    lambda: f64,
    psi_id: &str,
    qeps_id: &str,
) -> Result<f64> {
    Ok(tanaka_estimate(record, x, eps, lambda, psi_id, qeps_id)?.residual())
}

/// One row of the occupation-consistency report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub eps: f64,
    /// `int phi(x) Lambda^{x,eps}_t dx - int_0^t <phi, mu_s> ds`.
    pub gap: f64,
    pub gap_abs: f64,
}

/// Compare `int phi(x) Lambda^{x,eps}_t dx` (x-grid quadrature) against the
/// occupation integral `int_0^t <phi, mu_s> ds` for a sequence of eps; the
/// gap is the mollification error `int_0^t <q_eps * phi - phi, mu_s> ds` and
/// must shrink like O(eps) for smooth phi.
pub fn occupation_consistency(
    record: &PathRecord,
    model: &ModelCoefficients,
    phi: &TestFunction,
    eps_sequence: &[f64],
    grid_lo: f64,
    grid_hi: f64,
    grid_points: usize,
) -> Result<Vec<ConsistencyRow>> {
    if record.dim != 1 {
        return Err(SdsmError::Config(
            "the occupation-consistency grid integral is implemented for d = 1".into(),
        ));
    }
    if grid_points < 3 || grid_points % 2 == 0 {
        return Err(SdsmError::Config("need an odd grid size >= 3 for Simpson weights".into()));
    }
    let sigma_sq = model.sigma0_sq()?;
    let h = (grid_hi - grid_lo) / (grid_points - 1) as f64;
    let xs: Vec<f64> = (0..grid_points).map(|i| grid_lo + i as f64 * h).collect();
    let mut weights = vec![0.0; grid_points];
    for (i, w) in weights.iter_mut().enumerate() {
        *w = if i == 0 || i == grid_points - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        } * h
            / 3.0;
    }
    // Kernel-mass check: the grid must carry the smallest kernel's mass.
    let eps_min = eps_sequence.iter().cloned().fold(f64::INFINITY, f64::min);
    {
        let v = sigma_sq * eps_min;
        let norm = (2.0 * std::f64::consts::PI * v).powf(-0.5);
        let z = 0.5 * (grid_lo + grid_hi);
        let mass: f64 = xs
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * norm * (-(x - z) * (x - z) / (2.0 * v)).exp())
            .sum();
        if (mass - 1.0).abs() > 1e-3 {
            return Err(SdsmError::Config(format!(
                "grid too coarse for eps = {eps_min}: kernel mass {mass}"
            )));
        }
    }
    // Occupation side, phi directly against the path.
    let occ = trapezoid_over_snapshots(record, |pos| {
        let m = pos.len();
        let mut acc = 0.0;
        for k in 0..m {
            acc += phi.value(&pos[k..k + 1]);
        }
        acc * record.mass
    });
    let mut rows = Vec::new();
    for &eps in eps_sequence {
        let v = sigma_sq * eps;
        let norm = (2.0 * std::f64::consts::PI * v).powf(-0.5);
        let denom = 2.0 * v;
        // int phi(x) Lambda^{x,eps} dx = int_0^t < (q_eps * phi), mu_s > ds
        // with the x-integral done on the grid.
        let smoothed = trapezoid_over_snapshots(record, |pos| {
            let m = pos.len();
            let mut acc = 0.0;
            for k in 0..m {
                let z = pos[k];
                let mut conv = 0.0;
                for (x, w) in xs.iter().zip(&weights) {
                    conv += w * phi.value(std::slice::from_ref(x))
                        * norm
                        * (-(x - z) * (x - z) / denom).exp();
                }
                acc += conv;
            }
            acc * record.mass
        });
        let gap = smoothed - occ;
        rows.push(ConsistencyRow { eps, gap, gap_abs: gap.abs() });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CFamily, HFamily, OffspringLaw};
    use crate::noise::NoiseMode;
    use crate::particles::{
        init_cloud, Mu0Spec, Observable, SimConfig, Simulator, Snapshot, Track,
    };
    use crate::rng::{RngFactory, StreamKind};
    use crate::testfn::ObservableSpec;

    fn frozen_record(x0: f64, t: f64, steps: usize) -> PathRecord {
        let snapshots = (0..=steps)
            .map(|i| Snapshot {
                time: t * i as f64 / steps as f64,
                positions: vec![x0],
            })
            .collect();
        PathRecord {
            dim: 1,
            mass: 1.0,
            dt: t / steps as f64,
            series: vec![],
            snapshots,
            events: None,
            final_alive: 1,
        }
    }

    fn reference() -> ModelCoefficients {
        ModelCoefficients::reference()
    }

    #[test]
    fn empty_path_gives_zero() {
        let record = PathRecord {
            dim: 1,
            mass: 1.0,
            dt: 0.01,
            series: vec![],
            snapshots: vec![],
            events: None,
            final_alive: 0,
        };
        let routes = local_time(&record, &reference(), &[0.0], 0.1, 1.0).unwrap();
        assert_eq!(routes.mollified, 0.0);
        assert_eq!(routes.resolvent_form, 0.0);
    }

    #[test]
    fn frozen_particle_local_time_is_exact() {
        // Constant integrand: Lambda = t * mass * q_eps(x - x0).
        let model = reference();
        let record = frozen_record(0.3, 0.5, 10);
        let eps = 0.1;
        let x = [0.0];
        let routes = local_time(&record, &model, &x, eps, 1.0).unwrap();
        let v = 2.0 * eps;
        let expect = 0.5
            * (2.0 * std::f64::consts::PI * v).powf(-0.5)
            * (-(0.3f64).powi(2) / (2.0 * v)).exp();
        assert!((routes.mollified - expect).abs() < 1e-12, "{routes:?}");
        assert!(routes.difference < 1e-7, "routes disagree: {routes:?}");
    }

    #[test]
    fn lambda_invariance_of_the_resolvent_route() {
        let model = reference();
        let record = frozen_record(0.4, 0.5, 16);
        let mut values = Vec::new();
        for &lambda in &[0.5, 1.0, 2.0] {
            let routes = local_time(&record, &model, &[0.1], 0.1, lambda).unwrap();
            values.push(routes.resolvent_form);
        }
        for w in values.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-7, "{values:?}");
        }
    }

    #[test]
    fn dimension_gate() {
        let record = PathRecord {
            dim: 4,
            mass: 1.0,
            dt: 0.01,
            series: vec![],
            snapshots: vec![],
            events: None,
            final_alive: 0,
        };
        assert!(matches!(
            local_time(&record, &reference(), &[0.0; 4], 0.1, 1.0),
            Err(SdsmError::DimensionUnsupported(4))
        ));
    }

    #[test]
    fn monotone_nonnegative_in_time() {
        let model = reference();
        let config = SimConfig {
            t_end: 0.2,
            dt: 2e-3,
            theta: 2.0,
            n: 5,
            snapshot_stride: 1,
            store_snapshots: true,
            record_events: false,
            noise_mode: NoiseMode::Auto,
            allow_degenerate: false,
            lineage: false,
        };
        let sim = Simulator::new(&model, config, vec![]).unwrap();
        let record = sim.run(&Mu0Spec::unit_point_mass(1), &RngFactory::new(40), 0).unwrap();
        let series = mollified_series(&record, &model, &[0.2], 0.05).unwrap();
        let mut prev = -1.0;
        for (_, v) in series {
            assert!(v >= prev - 1e-15 && v >= 0.0);
            prev = v;
        }
    }

    fn tanaka_run(dt: f64, seed: u64, x: f64, eps: f64, lambda: f64) -> (PathRecord, ModelCoefficients) {
        let model = reference();
        let config = SimConfig {
            t_end: 0.2,
            dt,
            theta: 2.0,
            n: 5,
            snapshot_stride: 1,
            store_snapshots: true,
            record_events: false,
            noise_mode: NoiseMode::Auto,
            allow_degenerate: false,
            lineage: false,
        };
        let psi = Observable::from_spec(
            "psi",
            &ObservableSpec::ResolventKernelAt { x: vec![x], lambda, eps },
            &model,
            Track::Full,
        )
        .unwrap();
        let qeps = Observable::from_spec(
            "qeps",
            &ObservableSpec::HeatKernelAt { x: vec![x], eps },
            &model,
            Track::Full,
        )
        .unwrap();
        let sim = Simulator::new(&model, config, vec![psi, qeps]).unwrap();
        let record = sim.run(&Mu0Spec::unit_point_mass(1), &RngFactory::new(seed), 0).unwrap();
        (record, model)
    }

    #[test]
    fn tanaka_residual_small_and_ablation_fails() {
        let (record, _model) = tanaka_run(1e-3, 5, 0.0, 0.05, 1.0);
        let est = tanaka_estimate(&record, &[0.0], 0.05, 1.0, "psi", "qeps").unwrap();
        let resid = est.residual();
        // The corrected residual is pure discretization error.
        assert!(resid < 0.05, "residual {resid} (value {})", est.value);
        // Dropping the branching term must leave a residual comparable to
        // M itself (negative control).
        let ablated = (est.value
            - (est.initial_kernel_mass - est.terminal_kernel_mass
                + est.lambda_integral
                + est.common_noise_term
                + est.individual_term))
            .abs();
        assert!(
            ablated > 0.2 * est.branching_term.abs().max(1e-6),
            "ablated {ablated} vs M {}",
            est.branching_term
        );
    }

    #[test]
    fn far_field_both_sides_vanish() {
        let (record, _model) = tanaka_run(2e-3, 6, 20.0, 0.05, 1.0);
        let est = tanaka_estimate(&record, &[20.0], 0.05, 1.0, "psi", "qeps").unwrap();
        assert!(est.value.abs() < 1e-8, "Lambda at |x|=20: {}", est.value);
        assert!(est.tanaka_rhs_corrected().abs() < 1e-6);
    }

    #[test]
    fn unregistered_observable_is_an_error() {
        let (record, _model) = tanaka_run(2e-3, 7, 0.0, 0.05, 1.0);
        assert!(matches!(
            tanaka_estimate(&record, &[0.0], 0.05, 1.0, "nope", "qeps"),
            Err(SdsmError::UnknownObservable(_))
        ));
    }

    #[test]
    fn occupation_consistency_frozen_oracle() {
        // gamma = 0, frozen particle at x0 inside supp(phi):
        // gap = t * mass * (q_eps * phi - phi)(x0), computable directly.
        let model = ModelCoefficients::new(
            1,
            CFamily::ConstantC { value: 0.0 },
            HFamily::ZeroH,
            0.0,
            OffspringLaw::critical_binary(),
        )
        .unwrap();
        // sigma0^2 = 0 has no kernel; use the reference model's kernels but
        // a hand-built frozen record (the record does not know the model).
        let _ = model;
        let record = frozen_record(0.5, 0.4, 8);
        let phi = TestFunction::CompactBump { center: vec![0.0], radius: 3.0 };
        let eps = 0.05;
        let rows = occupation_consistency(
            &record,
            &reference(),
            &phi,
            &[eps],
            -4.5,
            4.5,
            361,
        )
        .unwrap();
        // Direct convolution oracle by fine midpoint quadrature.
        let v = 2.0 * eps;
        let norm = (2.0 * std::f64::consts::PI * v).powf(-0.5);
        let n = 200_000;
        let (lo, hi) = (-5.0, 5.0);
        let dx = (hi - lo) / n as f64;
        let mut conv = 0.0;
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * dx;
            conv += phi.value(&[x]) * norm * (-(x - 0.5) * (x - 0.5) / (2.0 * v)).exp() * dx;
        }
        let expect = 0.4 * (conv - phi.value(&[0.5]));
        assert!(
            (rows[0].gap - expect).abs() < 1e-6,
            "gap {} vs oracle {expect}",
            rows[0].gap
        );
    }

    #[test]
    fn occupation_consistency_shrinks_with_eps() {
        let model = reference();
        let config = SimConfig {
            t_end: 0.2,
            dt: 2e-3,
            theta: 2.0,
            n: 5,
            snapshot_stride: 1,
            store_snapshots: true,
            record_events: false,
            noise_mode: NoiseMode::Auto,
            allow_degenerate: false,
            lineage: false,
        };
        let sim = Simulator::new(&model, config, vec![]).unwrap();
        let record = sim.run(&Mu0Spec::unit_point_mass(1), &RngFactory::new(50), 3).unwrap();
        let phi = TestFunction::CompactBump { center: vec![0.0], radius: 3.0 };
        let rows = occupation_consistency(
            &record,
            &model,
            &phi,
            &[0.2, 0.1, 0.05],
            -4.5,
            4.5,
            361,
        )
        .unwrap();
        assert!(rows[0].gap_abs > rows[1].gap_abs && rows[1].gap_abs > rows[2].gap_abs,
            "{rows:?}");
        // Rate consistent with O(eps): halving eps roughly halves the gap.
        let r1 = rows[1].gap_abs / rows[0].gap_abs;
        let r2 = rows[2].gap_abs / rows[1].gap_abs;
        assert!((0.25..=0.85).contains(&r1), "ratio {r1}");
        assert!((0.25..=0.85).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn grid_too_coarse_is_an_error() {
        let record = frozen_record(0.0, 0.1, 4);
        let phi = TestFunction::CompactBump { center: vec![0.0], radius: 3.0 };
        let err = occupation_consistency(&record, &reference(), &phi, &[0.01], -4.0, 4.0, 11);
        assert!(err.is_err());
    }

    #[test]
    fn coarse_snapshot_requirement() {
        // init_cloud-only record (single snapshot) yields zero.
        let factory = RngFactory::new(1);
        let mut rng = factory.substream(StreamKind::Init, 0, 0);
        let cloud = init_cloud(&Mu0Spec::unit_point_mass(1), 2.0, 3, 1, false, &mut rng);
        let record = PathRecord {
            dim: 1,
            mass: cloud.mass,
            dt: 0.01,
            series: vec![],
            snapshots: vec![Snapshot { time: 0.0, positions: cloud.positions.clone() }],
            events: None,
            final_alive: cloud.alive(),
        };
        let routes = local_time(&record, &reference(), &[0.0], 0.1, 1.0).unwrap();
        assert_eq!(routes.mollified, 0.0);
    }
}
