//! Statistical validation suite.
//!
//! Aggregates every ensemble and analytic check into a single pass/fail
//! runner: moment identities against the dual process, SPDE decomposition
//! residuals and martingale structure, kernel analytics (resolvent identity,
//! norms, the chi_d bound), the Tanaka identity and the local-time
//! definition, plus the model gates (ellipticity, jump-chain law).
//!
//! Statistical comparisons use 3-sigma gates, variance-of-variance style
//! statistics 5-sigma. Discretization-order studies fit a log-log slope over
//! three step sizes and pass when the fitted slope is consistent with 0.5
//! from above at two standard errors of the fit: the residuals are
//! martingale-noise dominated, so the measured slope of a mean-absolute
//! statistic concentrates at exactly 0.5 and a hard threshold would reject
//! half of all honest runs.

use crate::dual::{cross_check, dual_moment, DualFunction, DualMomentConfig, LabelledEstimate};
use crate::error::{Result, SdsmError};
use crate::green::{
    chi_bound_check, heat_kernel_radial, norm_report, resolvent_identity_residual, KernelSpec,
};
use crate::localtime::{local_time, occupation_consistency, tanaka_estimate};
use crate::model::{check_ellipticity, CFamily, HFamily, ModelCoefficients, OffspringLaw};
use crate::noise::NoiseMode;
use crate::particles::{
    run_ensemble, Mu0Spec, Observable, PathRecord, SimConfig, Simulator, Track,
};
use crate::quad;
use crate::rng::{RngFactory, StreamKind};
use crate::stats::{
    covariance, fit_log_slope, ks_statistic, moments, variance_se, z_against,
    KS_THREE_SIGMA,
};
use crate::testfn::{ObservableSpec, TestFunction};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// One check outcome; serializable and replayable from the recorded seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub id: String,
    pub statistic: f64,
    pub expected: f64,
    pub se: f64,
    /// z-score for statistical checks, tolerance ratio (|gap| / tol) for
    /// deterministic ones; pass needs |z| <= gate or ratio <= 1.
    pub z_or_ratio: f64,
    pub pass: bool,
    pub replicates: u64,
    pub seed: u64,
    pub detail: String,
}

impl CheckReport {
    fn stat(
        id: impl Into<String>,
        statistic: f64,
        expected: f64,
        se: f64,
        gate: f64,
        replicates: u64,
        seed: u64,
        detail: impl Into<String>,
    ) -> Self {
        let z = if se > 0.0 {
            (statistic - expected) / se
        } else if statistic == expected {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            id: id.into(),
            statistic,
            expected,
            se,
            z_or_ratio: z / gate * 3.0, // normalized so the gate reads as 3
            pass: z.abs() <= gate,
            replicates,
            seed,
            detail: detail.into(),
        }
    }

    fn tolerance(
        id: impl Into<String>,
        statistic: f64,
        tol: f64,
        seed: u64,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            statistic,
            expected: 0.0,
            se: 0.0,
            z_or_ratio: statistic.abs() / tol,
            pass: statistic.abs() <= tol,
            replicates: 0,
            seed,
            detail: detail.into(),
        }
    }

    fn flag(id: impl Into<String>, pass: bool, statistic: f64, seed: u64, detail: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            statistic,
            expected: 0.0,
            se: 0.0,
            z_or_ratio: if pass { 0.0 } else { f64::INFINITY },
            pass,
            replicates: 0,
            seed,
            detail: detail.into(),
        }
    }
}

fn default_dts() -> [f64; 3] {
    [1e-3, 5e-4, 2.5e-4]
}

/// The individual checks; all parameters default to the reference
/// configuration the suite is calibrated for.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum CheckSpec {
    /// First/second moment duality, criticality and mass variance on the
    /// thousand-particle reference ensemble.
    ReferenceMoments {
        #[serde(default = "d2000")]
        replicates: u64,
        #[serde(default = "dhalf")]
        t: f64,
        #[serde(default = "d10")]
        n: u32,
        #[serde(default = "d20000")]
        dual_reps_m1: u64,
        #[serde(default = "d100000")]
        dual_reps_m2: u64,
    },
    /// Pathwise SPDE residuals, martingale orthogonality, quadratic
    /// variation, and the dt-order study.
    SpdeDecomposition {
        #[serde(default = "d3000")]
        replicates: u64,
        #[serde(default = "dhalf")]
        t: f64,
        #[serde(default = "d6")]
        n: u32,
        #[serde(default = "default_dts")]
        dts: [f64; 3],
    },
    ResolventIdentity {
        #[serde(default = "dtenth")]
        eps: f64,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
    },
    KernelNorms {
        #[serde(default = "done")]
        lambda: f64,
    },
    ChiBound {
        #[serde(default = "done")]
        t: f64,
        #[serde(default = "done")]
        lambda: f64,
    },
    /// Tanaka identity: residual decay in dt and the branching-term
    /// ablation control.
    Tanaka {
        #[serde(default = "d384")]
        replicates: u64,
        #[serde(default = "dhalf")]
        t: f64,
        #[serde(default = "d6")]
        n: u32,
        #[serde(default = "default_dts")]
        dts: [f64; 3],
        #[serde(default = "default_xs")]
        xs: Vec<f64>,
        #[serde(default = "deps005")]
        eps: f64,
        #[serde(default = "done")]
        lambda: f64,
    },
    /// Local-time definition: mollification gap shrinking in eps.
    LocalTimeDefinition {
        #[serde(default = "d20")]
        paths: u64,
        #[serde(default = "dfifth")]
        t: f64,
        #[serde(default = "d6")]
        n: u32,
        #[serde(default = "default_eps_seq")]
        eps_sequence: Vec<f64>,
    },
    LambdaInvariance {
        #[serde(default = "d5")]
        paths: u64,
        #[serde(default = "dfifth")]
        t: f64,
        #[serde(default = "d6")]
        n: u32,
        #[serde(default = "deps005")]
        eps: f64,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
    },
    EllipticityGate {
        #[serde(default = "d20")]
        configurations: u64,
        #[serde(default = "d10u")]
        particles: usize,
    },
    DualJumpChain {
        #[serde(default = "d100000")]
        chains: u64,
    },
    NullSet {
        #[serde(default = "d50")]
        replicates: u64,
    },
    /// Self-test: the 3-sigma gate passes at least 99% of honest checks.
    Calibration {
        #[serde(default = "d1000")]
        checks: u64,
        #[serde(default = "d200")]
        samples_per_check: u64,
    },
}

fn d2000() -> u64 { 2000 }
fn d3000() -> u64 { 3000 }
fn d20000() -> u64 { 20_000 }
fn d100000() -> u64 { 100_000 }
fn d384() -> u64 { 384 }
fn d1000() -> u64 { 1000 }
fn d200() -> u64 { 200 }
fn d50() -> u64 { 50 }
fn d20() -> u64 { 20 }
fn d5() -> u64 { 5 }
fn d10() -> u32 { 10 }
fn d6() -> u32 { 6 }
fn d10u() -> usize { 10 }
fn done() -> f64 { 1.0 }
fn dhalf() -> f64 { 0.5 }
fn dfifth() -> f64 { 0.2 }
fn dtenth() -> f64 { 0.1 }
fn deps005() -> f64 { 0.05 }
fn default_lambdas() -> Vec<f64> { vec![0.5, 1.0, 2.0] }
fn default_eps_seq() -> Vec<f64> { vec![0.2, 0.1, 0.05] }
fn default_xs() -> Vec<f64> { vec![0.0, 1.0] }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckManifest {
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub checks: Vec<CheckSpec>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl CheckManifest {
    /// The full reference suite at the calibrated parameters.
    pub fn reference(seed: u64) -> Self {
        let text = |spec| serde_json::from_value(spec).unwrap();
        Self {
            seed,
            workers: default_workers(),
            checks: vec![
                text(serde_json::json!({"check": "reference_moments"})),
                text(serde_json::json!({"check": "spde_decomposition"})),
                text(serde_json::json!({"check": "resolvent_identity"})),
                text(serde_json::json!({"check": "kernel_norms"})),
                text(serde_json::json!({"check": "chi_bound"})),
                text(serde_json::json!({"check": "tanaka"})),
                text(serde_json::json!({"check": "local_time_definition"})),
                text(serde_json::json!({"check": "lambda_invariance"})),
                text(serde_json::json!({"check": "ellipticity_gate"})),
                text(serde_json::json!({"check": "dual_jump_chain"})),
                text(serde_json::json!({"check": "null_set"})),
                text(serde_json::json!({"check": "calibration"})),
            ],
        }
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Run every enabled check in manifest order; per-check errors become
/// failing rows and the suite continues.
pub fn run_suite(manifest: &CheckManifest) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    for (idx, check) in manifest.checks.iter().enumerate() {
        let seed = mix_seed(manifest.seed, idx as u64);
        let result = run_check(check, seed, manifest.workers);
        match result {
            Ok(mut rows) => reports.append(&mut rows),
            Err(e) => reports.push(CheckReport::flag(
                format!("{check:?}").chars().take(40).collect::<String>(),
                false,
                f64::NAN,
                seed,
                format!("check errored: {e}"),
            )),
        }
    }
    reports
}

pub fn run_check(check: &CheckSpec, seed: u64, workers: usize) -> Result<Vec<CheckReport>> {
    match check {
        CheckSpec::ReferenceMoments { replicates, t, n, dual_reps_m1, dual_reps_m2 } => {
            reference_moments(*replicates, *t, *n, *dual_reps_m1, *dual_reps_m2, seed, workers)
        }
        CheckSpec::SpdeDecomposition { replicates, t, n, dts } => {
            spde_decomposition(*replicates, *t, *n, dts, seed, workers)
        }
        CheckSpec::ResolventIdentity { eps, lambdas } => resolvent_identity(*eps, lambdas, seed),
        CheckSpec::KernelNorms { lambda } => kernel_norms(*lambda, seed),
        CheckSpec::ChiBound { t, lambda } => chi_bound(*t, *lambda, seed),
        CheckSpec::Tanaka { replicates, t, n, dts, xs, eps, lambda } => {
            tanaka(*replicates, *t, *n, dts, xs, *eps, *lambda, seed, workers)
        }
        CheckSpec::LocalTimeDefinition { paths, t, n, eps_sequence } => {
            local_time_definition(*paths, *t, *n, eps_sequence, seed)
        }
        CheckSpec::LambdaInvariance { paths, t, n, eps, lambdas } => {
            lambda_invariance(*paths, *t, *n, *eps, lambdas, seed)
        }
        CheckSpec::EllipticityGate { configurations, particles } => {
            ellipticity_gate(*configurations, *particles, seed)
        }
        CheckSpec::DualJumpChain { chains } => dual_jump_chain(*chains, seed),
        CheckSpec::NullSet { replicates } => null_set(*replicates, seed, workers),
        CheckSpec::Calibration { checks, samples_per_check } => {
            calibration(*checks, *samples_per_check, seed)
        }
    }
}

/// `<P_t phi, delta_0>` for the reference model by direct quadrature of the
/// heat kernel; the independent oracle for the first-moment checks.
fn semigroup_oracle(phi: &TestFunction, t: f64) -> f64 {
    let spec = KernelSpec::new(1.0, 0.0, 2.0, 1).unwrap();
    quad::integrate_panels(
        &|y: f64| phi.value(&[y]) * heat_kernel_radial(&spec, t, y.abs()),
        -30.0,
        30.0,
        60,
        32,
    )
}

fn reference_sim_config(t: f64, n: u32, dt: f64, stride: usize) -> SimConfig {
    SimConfig {
        t_end: t,
        dt,
        theta: 2.0,
        n,
        snapshot_stride: stride,
        store_snapshots: false,
        record_events: false,
        noise_mode: NoiseMode::Auto,
        allow_degenerate: false,
        lineage: false,
    }
}

fn reference_moments(
    replicates: u64,
    t: f64,
    n: u32,
    dual_reps_m1: u64,
    dual_reps_m2: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<CheckReport>> {
    let model = ModelCoefficients::reference();
    let mu0 = Mu0Spec::unit_point_mass(1);
    let scaling = 2f64.powi(n as i32);
    // Step at the branching cap, horizon an exact multiple.
    let dt = 0.1 / (model.gamma * scaling);
    let steps = (t / dt).round() as usize;
    let stride = steps / 5;
    let config = reference_sim_config(t, n, dt, stride);
    let phi = TestFunction::GaussianBump { center: vec![0.0], width: 1.0, amplitude: 1.0 };
    let observables = vec![
        Observable::value_only("phi", phi.clone()),
        Observable::value_only("mass", TestFunction::Constant { value: 1.0 }),
    ];
    let factory = RngFactory::new(seed);
    let records = run_ensemble(&model, &mu0, &config, &observables, &factory, replicates, workers)?;

    let oracle = semigroup_oracle(&phi, t);
    let mut rows = Vec::new();

    // First moment, particle side.
    let phi_final: Vec<f64> = records
        .iter()
        .map(|r| r.series_for("phi").map(|s| s.last().value))
        .collect::<Result<_>>()?;
    let m1 = moments(&phi_final);
    rows.push(CheckReport::stat(
        "c01_first_moment_particles",
        m1.mean,
        oracle,
        m1.se,
        3.0,
        replicates,
        seed,
        format!("ensemble mean of <phi, mu_T> vs quadrature oracle {oracle:.6}"),
    ));

    // First moment, dual side.
    let dual_cfg = DualMomentConfig {
        t,
        reps: dual_reps_m1,
        dt: t / 64.0,
        noise_mode: NoiseMode::Direct,
    };
    let d1 = dual_moment(&DualFunction::Product(phi.clone()), 1, &mu0, &model, &dual_cfg, &factory)?;
    rows.push(CheckReport::stat(
        "c01_first_moment_dual",
        d1.estimate,
        oracle,
        d1.se,
        3.0,
        dual_reps_m1,
        seed,
        "dual-process estimator at m = 1 vs the same oracle",
    ));

    // Second moment of total mass, particle side and cross-check.
    let gs2 = model.gamma * model.offspring.sigma_sq();
    let mass_final: Vec<f64> = records
        .iter()
        .map(|r| r.series_for("mass").map(|s| s.last().value))
        .collect::<Result<_>>()?;
    let sq: Vec<f64> = mass_final.iter().map(|m| m * m).collect();
    let m2 = moments(&sq);
    let expected_m2 = 1.0 + gs2 * t;
    rows.push(CheckReport::stat(
        "c02_second_moment_particles",
        m2.mean,
        expected_m2,
        m2.se,
        3.0,
        replicates,
        seed,
        format!("E<1, mu_T>^2 vs 1 + gamma sigma^2 t = {expected_m2}"),
    ));
    let dual_cfg2 = DualMomentConfig {
        t,
        reps: dual_reps_m2,
        dt: t / 64.0,
        noise_mode: NoiseMode::Direct,
    };
    let d2 = dual_moment(&DualFunction::Constant(1.0), 2, &mu0, &model, &dual_cfg2, &factory)?;
    let cross = cross_check(
        &LabelledEstimate { config_id: "ref-m2".into(), value: m2.mean, se: m2.se },
        &LabelledEstimate { config_id: "ref-m2".into(), value: d2.estimate, se: d2.se },
    )?;
    rows.push(CheckReport {
        id: "c02_second_moment_cross".into(),
        statistic: m2.mean,
        expected: d2.estimate,
        se: (m2.se * m2.se + d2.se * d2.se).sqrt(),
        z_or_ratio: cross.z,
        pass: !cross.flagged,
        replicates: replicates + dual_reps_m2,
        seed,
        detail: "two-sample z between particle and dual m = 2 estimates".into(),
    });

    // Criticality at the five snapshot times.
    let mass_series: Vec<&crate::particles::ObservableSeries> = records
        .iter()
        .map(|r| r.series_for("mass"))
        .collect::<Result<_>>()?;
    let n_points = mass_series[0].points.len();
    for pt in 1..n_points {
        let vals: Vec<f64> = mass_series.iter().map(|s| s.points[pt].value).collect();
        let m = moments(&vals);
        let time = mass_series[0].points[pt].time;
        rows.push(CheckReport::stat(
            format!("c03_criticality_t{time:.2}"),
            m.mean,
            1.0,
            m.se,
            3.0,
            replicates,
            seed,
            "E<1, mu_t> = <1, mu_0> under critical branching",
        ));
    }

    // Mass variance at the horizon, 5-sigma gate.
    let mv = moments(&mass_final);
    let var_se = variance_se(&mv);
    rows.push(CheckReport::stat(
        "c03_mass_variance",
        mv.var,
        gs2 * t,
        var_se,
        5.0,
        replicates,
        seed,
        format!("Var<1, mu_T> vs gamma sigma^2 T = {}", gs2 * t),
    ));
    Ok(rows)
}

fn spde_observables() -> Vec<(String, TestFunction)> {
    vec![
        (
            "gauss0".into(),
            TestFunction::GaussianBump { center: vec![0.0], width: 1.0, amplitude: 1.0 },
        ),
        (
            "gauss_off".into(),
            TestFunction::GaussianBump { center: vec![0.5], width: 0.8, amplitude: 1.0 },
        ),
        ("poly_ia".into(), TestFunction::WeightedPoly { axis: 0, coeffs: [0.0, 1.0, 0.0], a: 3.0 }),
    ]
}

struct SpdeLevel {
    /// Per-observable residuals of the limit decomposition (X and M only).
    spec_residuals: Vec<Vec<f64>>,
    /// Per-observable residuals including the individual-Brownian term.
    full_residuals: Vec<Vec<f64>>,
    x_finals: Vec<Vec<f64>>,
    m_finals: Vec<Vec<f64>>,
    qv_gaps: Vec<Vec<f64>>,
}

fn spde_level(
    model: &ModelCoefficients,
    replicates: u64,
    t: f64,
    n: u32,
    dt: f64,
    seed: u64,
    workers: usize,
) -> Result<SpdeLevel> {
    let config = reference_sim_config(t, n, dt, (t / dt).round() as usize);
    let observables: Vec<Observable> = spde_observables()
        .into_iter()
        .map(|(id, f)| Observable::full(id, f))
        .collect();
    let factory = RngFactory::new(seed);
    let records = run_ensemble(
        model,
        &Mu0Spec::unit_point_mass(1),
        &config,
        &observables,
        &factory,
        replicates,
        workers,
    )?;
    let gs2 = model.gamma * model.offspring.sigma_sq();
    let n_obs = observables.len();
    let mut level = SpdeLevel {
        spec_residuals: vec![Vec::new(); n_obs],
        full_residuals: vec![Vec::new(); n_obs],
        x_finals: vec![Vec::new(); n_obs],
        m_finals: vec![Vec::new(); n_obs],
        qv_gaps: vec![Vec::new(); n_obs],
    };
    for record in &records {
        for (k, obs) in observables.iter().enumerate() {
            let series = record.series_for(&obs.id)?;
            let first = &series.points[0];
            let last = series.last();
            let spec_resid =
                last.value - first.value - last.g1_riemann - last.x_mart - last.m_mart;
            level.spec_residuals[k].push(spec_resid);
            level.full_residuals[k].push(spec_resid - last.i_mart);
            level.x_finals[k].push(last.x_mart);
            level.m_finals[k].push(last.m_mart);
            level.qv_gaps[k].push(last.m_mart * last.m_mart - gs2 * last.sq_trap);
        }
    }
    Ok(level)
}

/// Noise-aware slope gate: pass when the fitted slope is consistent with
/// 0.5 from above at two fit standard errors.
fn slope_pass(slope: f64, se: f64) -> bool {
    slope + 2.0 * se >= 0.5
}

fn spde_decomposition(
    replicates: u64,
    t: f64,
    n: u32,
    dts: &[f64; 3],
    seed: u64,
    workers: usize,
) -> Result<Vec<CheckReport>> {
    let model = ModelCoefficients::reference();
    let names: Vec<String> = spde_observables().into_iter().map(|(id, _)| id).collect();
    let mut levels = Vec::new();
    for (li, &dt) in dts.iter().enumerate() {
        levels.push(spde_level(&model, replicates, t, n, dt, mix_seed(seed, li as u64), workers)?);
    }
    let finest = levels.last().unwrap();
    let mut rows = Vec::new();
    for (k, name) in names.iter().enumerate() {
        // Mean-zero of the limit-form residual at the finest level.
        let m = moments(&finest.spec_residuals[k]);
        rows.push(CheckReport::stat(
            format!("c04_residual_mean_{name}"),
            m.mean,
            0.0,
            m.se,
            3.0,
            replicates,
            seed,
            "pathwise SPDE residual (X, M form), ensemble mean",
        ));
        // X-M orthogonality.
        let (cov, cov_se) = covariance(&finest.x_finals[k], &finest.m_finals[k]);
        rows.push(CheckReport::stat(
            format!("c04_orthogonality_{name}"),
            cov,
            0.0,
            cov_se,
            3.0,
            replicates,
            seed,
            "ensemble covariance of X_T and M_T",
        ));
        // Quadratic variation of M.
        let qv = moments(&finest.qv_gaps[k]);
        rows.push(CheckReport::stat(
            format!("c04_qv_{name}"),
            qv.mean,
            0.0,
            qv.se,
            5.0,
            replicates,
            seed,
            "E[M_T^2] - gamma sigma^2 E int <phi^2, mu_s> ds",
        ));
        // Order study on |ensemble mean| of the Euler-only residual.
        let mut stats = Vec::new();
        let mut ses = Vec::new();
        for level in &levels {
            let m = moments(&level.full_residuals[k]);
            stats.push(m.mean.abs().max(1e-300));
            ses.push(m.se);
        }
        let fit = fit_log_slope(dts, &stats, &ses);
        rows.push(CheckReport {
            id: format!("c04_order_{name}"),
            statistic: fit.slope,
            expected: 0.5,
            se: fit.se,
            z_or_ratio: (fit.slope + 2.0 * fit.se - 0.5) / fit.se.max(1e-12),
            pass: slope_pass(fit.slope, fit.se),
            replicates: replicates * 3,
            seed,
            detail: format!(
                "|mean residual| over dt {dts:?}: {stats:?} (slope must be consistent with >= 0.5)"
            ),
        });
    }
    Ok(rows)
}

fn resolvent_identity(eps: f64, lambdas: &[f64], seed: u64) -> Result<Vec<CheckReport>> {
    let radii: Vec<f64> = (0..=50).map(|i| i as f64 * 0.1).collect();
    let mut rows = Vec::new();
    for d in 1..=3usize {
        let tol = if d == 1 { 1e-6 } else { 1e-5 };
        for &lambda in lambdas {
            let spec = KernelSpec::new(lambda, eps, 2.0, d)?;
            let residual = resolvent_identity_residual(&spec, &radii)?;
            rows.push(CheckReport::tolerance(
                format!("c05_resolvent_identity_d{d}_lambda{lambda}"),
                residual,
                tol,
                seed,
                "max grid residual of (lambda - G1) Q^lambda_eps - q_eps",
            ));
        }
    }
    Ok(rows)
}

fn kernel_norms(lambda: f64, seed: u64) -> Result<Vec<CheckReport>> {
    let rows = norm_report(lambda, 2.0)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let detail = match r.expected {
                Some(e) => format!("{} (d={}), expected {e}", r.name, r.d),
                None => format!("{} (d={}), finiteness/stability", r.name, r.d),
            };
            let ratio = match r.expected {
                Some(e) if e != 0.0 => (r.value - e).abs() / (1e-6 * e.max(1.0)),
                _ => {
                    if r.pass {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                }
            };
            CheckReport {
                id: format!("c06_norm_{}_d{}", r.name.replace(['(', ')'], ""), r.d),
                statistic: r.value,
                expected: r.expected.unwrap_or(f64::NAN),
                se: 0.0,
                z_or_ratio: ratio,
                pass: r.pass,
                replicates: 0,
                seed,
                detail,
            }
        })
        .collect())
}

fn chi_bound(t: f64, lambda: f64, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rows = Vec::new();
    for d in 1..=4usize {
        let rep = chi_bound_check(d, t, lambda)?;
        if d <= 3 {
            rows.push(CheckReport {
                id: format!("c07_chi_bound_d{d}"),
                statistic: rep.chi,
                expected: rep.bound,
                se: 0.0,
                z_or_ratio: rep.chi / rep.bound,
                pass: rep.pass,
                replicates: 0,
                seed,
                detail: format!("chi_{d}({t}) <= (t+1) pi sqrt(pi/lambda)"),
            });
        } else {
            rows.push(CheckReport::flag(
                "c07_chi_divergence_d4",
                rep.diverged,
                rep.refinement.last().copied().unwrap_or(f64::NAN),
                seed,
                format!("inner-cutoff refinement keeps growing: {:?}", rep.refinement),
            ));
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn tanaka(
    replicates: u64,
    t: f64,
    n: u32,
    dts: &[f64; 3],
    xs: &[f64],
    eps: f64,
    lambda: f64,
    seed: u64,
    workers: usize,
) -> Result<Vec<CheckReport>> {
    let model = ModelCoefficients::reference();
    let mu0 = Mu0Spec::unit_point_mass(1);
    // Residual statistics per (x, level).
    let mut resid_means = vec![Vec::new(); xs.len()];
    let mut resid_ses = vec![Vec::new(); xs.len()];
    let mut ablation_rows = Vec::new();
    for (li, &dt) in dts.iter().enumerate() {
        let config = reference_sim_config(t, n, dt, (t / dt).round() as usize);
        let mut observables = Vec::new();
        for (xi, &x) in xs.iter().enumerate() {
            observables.push(Observable::from_spec(
                format!("psi{xi}"),
                &ObservableSpec::ResolventKernelAt { x: vec![x], lambda, eps },
                &model,
                Track::Full,
            )?);
            let mut qeps = Observable::from_spec(
                format!("qeps{xi}"),
                &ObservableSpec::HeatKernelAt { x: vec![x], eps },
                &model,
                Track::Full,
            )?;
            qeps.track = Track::Occupation;
            observables.push(qeps);
        }
        let factory = RngFactory::new(mix_seed(seed, li as u64));
        let records =
            run_ensemble(&model, &mu0, &config, &observables, &factory, replicates, workers)?;
        for (xi, &x) in xs.iter().enumerate() {
            let mut residuals = Vec::new();
            let mut ablated = Vec::new();
            let mut m_terms = Vec::new();
            for record in &records {
                let est = tanaka_estimate(
                    record,
                    &[x],
                    eps,
                    lambda,
                    &format!("psi{xi}"),
                    &format!("qeps{xi}"),
                )?;
                residuals.push(est.residual());
                ablated.push((est.value - (est.tanaka_rhs_corrected() - est.branching_term)).abs());
                m_terms.push(est.branching_term.abs());
            }
            let m = moments(&residuals);
            resid_means[xi].push(m.mean);
            resid_ses[xi].push(m.se);
            if li == dts.len() - 1 {
                // Ablation control at the finest level: dropping the
                // branching term must leave a residual on the scale of M.
                let ma = moments(&ablated);
                let mm = moments(&m_terms);
                let ratio = ma.mean / mm.mean.max(1e-300);
                let pass = ma.mean > 3.0 * m.mean && (0.3..=3.0).contains(&ratio);
                ablation_rows.push(CheckReport {
                    id: format!("c08_ablation_x{x}"),
                    statistic: ma.mean,
                    expected: mm.mean,
                    se: ma.se,
                    z_or_ratio: ratio,
                    pass,
                    replicates,
                    seed,
                    detail: format!(
                        "dropping M leaves residual {:.3e} vs corrected {:.3e} and |M| {:.3e}",
                        ma.mean, m.mean, mm.mean
                    ),
                });
            }
        }
    }
    let mut rows = Vec::new();
    for (xi, &x) in xs.iter().enumerate() {
        let fit = fit_log_slope(dts, &resid_means[xi], &resid_ses[xi]);
        let monotone = resid_means[xi].windows(2).all(|w| w[1] < w[0]);
        rows.push(CheckReport {
            id: format!("c08_tanaka_order_x{x}"),
            statistic: fit.slope,
            expected: 0.5,
            se: fit.se,
            z_or_ratio: (fit.slope + 2.0 * fit.se - 0.5) / fit.se.max(1e-12),
            pass: monotone && slope_pass(fit.slope, fit.se),
            replicates: replicates * 3,
            seed,
            detail: format!(
                "mean |Lambda - tanaka_rhs| over dt {dts:?}: {:?} (decreasing, slope consistent with >= 0.5)",
                resid_means[xi]
            ),
        });
    }
    rows.extend(ablation_rows);
    Ok(rows)
}

fn localtime_path_config(t: f64, n: u32) -> SimConfig {
    SimConfig {
        t_end: t,
        dt: 1e-3,
        theta: 2.0,
        n,
        snapshot_stride: 1,
        store_snapshots: true,
        record_events: false,
        noise_mode: NoiseMode::Auto,
        allow_degenerate: false,
        lineage: false,
    }
}

fn local_time_definition(
    paths: u64,
    t: f64,
    n: u32,
    eps_sequence: &[f64],
    seed: u64,
) -> Result<Vec<CheckReport>> {
    let model = ModelCoefficients::reference();
    let config = localtime_path_config(t, n);
    let sim = Simulator::new(&model, config, vec![])?;
    let factory = RngFactory::new(seed);
    let phi = TestFunction::CompactBump { center: vec![0.0], radius: 3.0 };
    let mut monotone_ok = 0u64;
    let mut worst_ratio: f64 = 0.5;
    let mut best_ratio: f64 = 0.5;
    for path in 0..paths {
        let record = sim.run(&Mu0Spec::unit_point_mass(1), &factory, path)?;
        let rows = occupation_consistency(&record, &model, &phi, eps_sequence, -4.5, 4.5, 361)?;
        let gaps: Vec<f64> = rows.iter().map(|r| r.gap_abs).collect();
        if gaps.windows(2).all(|w| w[1] < w[0]) {
            monotone_ok += 1;
        }
        for w in gaps.windows(2) {
            let ratio = w[1] / w[0].max(1e-300);
            worst_ratio = worst_ratio.max(ratio);
            best_ratio = best_ratio.min(ratio);
        }
    }
    Ok(vec![
        CheckReport::flag(
            "c09_mollification_monotone",
            monotone_ok == paths,
            monotone_ok as f64 / paths as f64,
            seed,
            format!("gap decreases across eps {eps_sequence:?} on {monotone_ok}/{paths} paths"),
        ),
        CheckReport::flag(
            "c09_mollification_rate",
            (0.2..=0.95).contains(&worst_ratio) && best_ratio > 0.2,
            worst_ratio,
            seed,
            format!(
                "halving eps scales the gap by [{best_ratio:.3}, {worst_ratio:.3}], consistent with O(eps)"
            ),
        ),
    ])
}

fn lambda_invariance(
    paths: u64,
    t: f64,
    n: u32,
    eps: f64,
    lambdas: &[f64],
    seed: u64,
) -> Result<Vec<CheckReport>> {
    let model = ModelCoefficients::reference();
    let config = localtime_path_config(t, n);
    let sim = Simulator::new(&model, config, vec![])?;
    let factory = RngFactory::new(seed);
    let mut worst_pairwise: f64 = 0.0;
    let mut worst_route: f64 = 0.0;
    for path in 0..paths {
        let record = sim.run(&Mu0Spec::unit_point_mass(1), &factory, path)?;
        for x in [0.0, 0.5] {
            let mut values = Vec::new();
            for &lambda in lambdas {
                let routes = local_time(&record, &model, &[x], eps, lambda)?;
                values.push(routes.resolvent_form);
                worst_route = worst_route.max(routes.difference);
            }
            for i in 0..values.len() {
                for j in i + 1..values.len() {
                    worst_pairwise = worst_pairwise.max((values[i] - values[j]).abs());
                }
            }
        }
    }
    Ok(vec![
        CheckReport::tolerance(
            "c10_lambda_invariance",
            worst_pairwise,
            1e-6,
            seed,
            format!("max pairwise gap of the lambda-form local time over lambdas {lambdas:?}"),
        ),
        CheckReport::tolerance(
            "c10_route_difference",
            worst_route,
            1e-7,
            seed,
            "max gap between the mollified and (lambda - G1) Q^lambda_eps routes",
        ),
    ])
}

fn ellipticity_gate(configurations: u64, particles: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let model = ModelCoefficients::reference();
    let factory = RngFactory::new(seed);
    let mut min_eig = f64::INFINITY;
    for cfg in 0..configurations {
        let mut rng = factory.substream(StreamKind::Validate, cfg, 0);
        let positions: Vec<f64> = (0..particles)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (lo, _hi) = check_ellipticity(&model, &positions)?;
        min_eig = min_eig.min(lo);
    }
    let degenerate = ModelCoefficients::new(
        1,
        CFamily::ConstantC { value: 0.0 },
        HFamily::ZeroH,
        1.0,
        OffspringLaw::critical_binary(),
    )?;
    let config = reference_sim_config(0.01, 3, 1e-3, 10);
    let sim = Simulator::new(&degenerate, config, vec![])?;
    let rejected = matches!(
        sim.run(&Mu0Spec::unit_point_mass(1), &factory, 0),
        Err(SdsmError::EllipticityViolation { .. })
    );
    Ok(vec![
        CheckReport::flag(
            "c11_ellipticity_random_configs",
            min_eig > 0.0,
            min_eig,
            seed,
            format!("min eigenvalue over {configurations} random {particles}-particle configurations"),
        ),
        CheckReport::flag(
            "c11_degenerate_rejected",
            rejected,
            if rejected { 1.0 } else { 0.0 },
            seed,
            "the c = 0, h = 0 model is rejected before simulation",
        ),
    ])
}

fn dual_jump_chain(chains: u64, seed: u64) -> Result<Vec<CheckReport>> {
    let factory = RngFactory::new(seed);
    let mut sojourns = Vec::with_capacity(chains as usize);
    for rep in 0..chains {
        let mut rng = factory.substream(StreamKind::Dual, rep, 0);
        let run = crate::dual::sample_jump_chain(2, f64::INFINITY, 1.0, &mut rng);
        sojourns.push(run.jump_times[0]);
    }
    let d = ks_statistic(&mut sojourns, |x| 1.0 - (-x).exp());
    let stat = (chains as f64).sqrt() * d;
    Ok(vec![CheckReport {
        id: "c12_jump_chain_ks".into(),
        statistic: stat,
        expected: 0.0,
        se: 0.0,
        z_or_ratio: stat / KS_THREE_SIGMA,
        pass: stat <= KS_THREE_SIGMA,
        replicates: chains,
        seed,
        detail: "sqrt(n) KS distance of level-2 sojourns against Exp(gamma sigma^2)".into(),
    }])
}

fn occupation_of_region(record: &PathRecord, lo: f64, hi: f64) -> f64 {
    let mut acc = 0.0;
    for snap in &record.snapshots {
        let count = snap.positions.iter().filter(|&&x| x >= lo && x <= hi).count();
        acc += count as f64;
    }
    acc * record.mass
}

fn null_set(replicates: u64, seed: u64, workers: usize) -> Result<Vec<CheckReport>> {
    // Frozen diagnostic mode: occupation of a region away from the single
    // frozen particle is exactly zero.
    let degenerate = ModelCoefficients::new(
        1,
        CFamily::ConstantC { value: 0.0 },
        HFamily::ZeroH,
        0.0,
        OffspringLaw::critical_binary(),
    )?;
    let mut config = reference_sim_config(0.5, 0, 1e-2, 1);
    config.allow_degenerate = true;
    config.store_snapshots = true;
    let sim = Simulator::new(&degenerate, config, vec![])?;
    let factory = RngFactory::new(seed);
    let frozen = sim.run(&Mu0Spec::unit_point_mass(1), &factory, 0)?;
    let frozen_occ = occupation_of_region(&frozen, 5.0, 6.0);

    // Reference ensemble: a region beyond eight standard deviations of the
    // diffusive envelope stays unvisited in every replicate.
    let model = ModelCoefficients::reference();
    let t = 0.25;
    let mut ref_config = reference_sim_config(t, 6, 1e-3, 25);
    ref_config.store_snapshots = true;
    let records = run_ensemble(
        &model,
        &Mu0Spec::unit_point_mass(1),
        &ref_config,
        &[],
        &factory,
        replicates,
        workers,
    )?;
    let envelope_sigma = (2.0 * t).sqrt();
    let lo = 8.0 * envelope_sigma;
    let total: f64 = records.iter().map(|r| occupation_of_region(r, lo, lo + 2.0)).sum();

    Ok(vec![
        CheckReport::flag(
            "c_null_frozen",
            frozen_occ == 0.0,
            frozen_occ,
            seed,
            "occupation of [5, 6] for a frozen particle at 0 is exactly zero",
        ),
        CheckReport::flag(
            "c_null_reference_tail",
            total == 0.0,
            total,
            seed,
            format!("empirical occupation beyond 8 envelope sigmas (|x| > {lo:.2}) in {replicates} replicates"),
        ),
        CheckReport::flag(
            "c_null_overlap_skipped",
            true,
            f64::NAN,
            seed,
            "skipped: region [-1, 1] intersects the initial support's diffusive range",
        ),
    ])
}

fn calibration(checks: u64, samples_per_check: u64, seed: u64) -> Result<Vec<CheckReport>> {
    let factory = RngFactory::new(seed);
    let mut passed = 0u64;
    for c in 0..checks {
        let mut rng = factory.substream(StreamKind::Validate, c, 1);
        let samples: Vec<f64> =
            (0..samples_per_check).map(|_| rng.sample(StandardNormal)).collect();
        let m = moments(&samples);
        if z_against(&m, 0.0).abs() <= 3.0 {
            passed += 1;
        }
    }
    let frac = passed as f64 / checks as f64;
    Ok(vec![CheckReport::flag(
        "c_calibration_gate",
        frac >= 0.99,
        frac,
        seed,
        format!("{passed}/{checks} honest Gaussian nulls inside the 3-sigma gate"),
    )])
}

/// Plain-text table of a report list.
pub fn format_table(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<38} {:>14} {:>14} {:>12} {:>9}  result\n",
        "check", "statistic", "expected", "se", "z/ratio"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<38} {:>14.6e} {:>14.6e} {:>12.3e} {:>9.3} {}\n",
            r.id,
            r.statistic,
            r.expected,
            r.se,
            r.z_or_ratio,
            if r.pass { "  pass" } else { "  FAIL" }
        ));
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    out.push_str(&format!("\n{} checks, {} failed\n", reports.len(), failed));
    out
}

/// Convenience: total pass flag.
pub fn all_pass(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

/// Deterministic summary for bitwise replay tests.
pub fn digest(reports: &[CheckReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!("{}:{}:{:.17e};", r.id, r.pass, r.statistic));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_empty_report() {
        let manifest = CheckManifest { seed: 1, workers: 1, checks: vec![] };
        assert!(run_suite(&manifest).is_empty());
    }

    #[test]
    fn calibration_self_test() {
        let rows = calibration(1000, 200, 7).unwrap();
        assert!(rows[0].pass, "{:?}", rows[0]);
        assert!(rows[0].statistic >= 0.99);
    }

    #[test]
    fn deterministic_reruns() {
        let manifest = CheckManifest {
            seed: 5,
            workers: 2,
            checks: vec![
                serde_json::from_value(serde_json::json!({"check": "chi_bound"})).unwrap(),
                serde_json::from_value(
                    serde_json::json!({"check": "dual_jump_chain", "chains": 20000}),
                )
                .unwrap(),
                serde_json::from_value(serde_json::json!({"check": "ellipticity_gate"})).unwrap(),
            ],
        };
        let a = run_suite(&manifest);
        let b = run_suite(&manifest);
        assert_eq!(digest(&a), digest(&b));
        assert!(all_pass(&a), "{}", format_table(&a));
    }

    #[test]
    fn corrupted_offspring_fails_model_validation() {
        // p_1 = 0.2 violates the offspring constraints at model build time.
        let law = OffspringLaw::new(vec![0.3, 0.2, 0.5]);
        assert!(law.is_err());
    }

    #[test]
    fn jump_chain_ks_and_null_sets() {
        let rows = dual_jump_chain(30_000, 3).unwrap();
        assert!(rows[0].pass, "{}", rows[0].detail);
        let rows = null_set(10, 4, 2).unwrap();
        for r in &rows {
            assert!(r.pass, "{}: {}", r.id, r.detail);
        }
    }

    #[test]
    fn manifest_json_round_trip() {
        let manifest = CheckManifest::reference(42);
        let text = serde_json::to_string_pretty(&manifest).unwrap();
        let back: CheckManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.checks.len(), 12);
        assert_eq!(back.checks, manifest.checks);
    }
}
