//! Function-valued dual process as a forward duplication Monte Carlo.
//!
//! The dual of the measure-valued process is a pair `(J, Y)`: `J` is a pure
//! death chain from `J_0 = m` with Poisson waiting times of intensity
//! `gamma sigma^2 l(l-1)/2` at level `l`, frozen at 1, and `Y` composes
//! semigroup flows of the correlated particle motion with random coordinate
//! projections at the jump times. Moments satisfy
//!
//! ```text
//! E <f, mu_t^m> = E [ <Y_t, mu_0^{J_t}> exp((gamma sigma^2 / 2) int_0^t J_s (J_s - 1) ds) ]
//! ```
//!
//! Evaluated forward: sample `J_t` points i.i.d. from the normalized initial
//! measure, diffuse them (no branching) through the inter-jump segments from
//! the latest jump backwards, duplicate one coordinate into a fresh slot at
//! each jump boundary, and evaluate `f` at the final `m` points; the
//! `|mu_0|^{J_t}` factor corrects for the non-probability product measure.
//! This gives an estimator of the moment that shares no code path with the
//! branching simulator's martingale bookkeeping, which is what makes the
//! cross-checks meaningful.

use crate::error::{Result, SdsmError};
use crate::model::ModelCoefficients;
use crate::noise::{NoiseMode, NoiseSampler};
use crate::particles::Mu0Spec;
use crate::rng::{RngFactory, StreamKind};
use crate::testfn::TestFunction;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

/// One sampled trajectory of the jump chain with its exponential weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualRun {
    /// Jump times `tau_1 < ... < tau_k` in `(0, t]`.
    pub jump_times: Vec<f64>,
    /// Level just before each jump (`m`, `m-1`, ...).
    pub levels_before: Vec<usize>,
    /// Projection pair `(i, j)`, `i != j`, zero-based slots at the pre-jump
    /// level, uniform over ordered pairs.
    pub pairs: Vec<(usize, usize)>,
    /// `J_t`.
    pub j_final: usize,
    /// `exp((gamma sigma^2 / 2) int_0^t J_s (J_s - 1) ds)`, computed in
    /// closed form from the sojourn intervals.
    pub weight: f64,
    pub horizon: f64,
}

/// Closed-form weight from the sojourn decomposition of `[0, t]`.
pub fn weight_from_sojourns(
    m: usize,
    jump_times: &[f64],
    t: f64,
    gamma_sigma2: f64,
) -> f64 {
    let mut exponent = 0.0;
    let mut level = m as f64;
    let mut prev = 0.0;
    for &tau in jump_times {
        exponent += level * (level - 1.0) * (tau - prev);
        level -= 1.0;
        prev = tau;
    }
    exponent += level * (level - 1.0) * (t - prev);
    (0.5 * gamma_sigma2 * exponent).exp()
}

/// Sample the death chain on `[0, t]` from level `m`.
pub fn sample_jump_chain<R: Rng>(
    m: usize,
    t: f64,
    gamma_sigma2: f64,
    rng: &mut R,
) -> DualRun {
    assert!(m >= 1, "the dual is defined here for J_0 = m >= 1");
    let mut jump_times = Vec::new();
    let mut levels_before = Vec::new();
    let mut pairs = Vec::new();
    let mut level = m;
    let mut clock = 0.0;
    while level >= 2 {
        let rate = gamma_sigma2 * (level * (level - 1)) as f64 / 2.0;
        let wait: f64 = rng.sample(Exp::new(rate).expect("positive rate"));
        clock += wait;
        if clock > t {
            break;
        }
        // Ordered pair (i, j), i != j, uniform over the level's slots.
        let i = rng.gen_range(0..level);
        let mut j = rng.gen_range(0..level - 1);
        if j >= i {
            j += 1;
        }
        jump_times.push(clock);
        levels_before.push(level);
        pairs.push((i, j));
        level -= 1;
    }
    let weight = weight_from_sojourns(m, &jump_times, t, gamma_sigma2);
    DualRun { jump_times, levels_before, pairs, j_final: level, weight, horizon: t }
}

/// Symmetric function of `m` points fed to the duality identity.
#[derive(Debug, Clone)]
pub enum DualFunction {
    /// `f(x_1, ..., x_m) = prod_k phi(x_k)`.
    Product(TestFunction),
    Constant(f64),
}

impl DualFunction {
    pub fn evaluate(&self, points: &[Vec<f64>]) -> f64 {
        match self {
            DualFunction::Product(phi) => points.iter().map(|x| phi.value(x)).product(),
            DualFunction::Constant(v) => *v,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualMomentConfig {
    pub t: f64,
    pub reps: u64,
    /// Euler step for the inter-jump diffusion segments.
    pub dt: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualEstimate {
    pub estimate: f64,
    pub se: f64,
    pub reps: u64,
    pub rejected: u64,
    /// Average of `J_t` over replicates (diagnostics).
    pub mean_j_final: f64,
}

/// Advance `points` by the correlated no-branching Euler flow for `duration`.
fn diffuse_segment(
    sampler: &NoiseSampler,
    dim: usize,
    points: &mut Vec<Vec<f64>>,
    duration: f64,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if duration <= 0.0 || points.is_empty() {
        return Ok(());
    }
    let steps = (duration / dt).ceil().max(1.0) as usize;
    let h = duration / steps as f64;
    let mut flat: Vec<f64> = points.iter().flatten().copied().collect();
    let mut common = vec![0.0; flat.len()];
    let mut indiv = vec![0.0; flat.len()];
    for _ in 0..steps {
        sampler.fill_common(&flat, h, rng, &mut common)?;
        sampler.fill_individual(h, rng, &mut indiv);
        for ((x, c), i) in flat.iter_mut().zip(&common).zip(&indiv) {
            *x += c + i;
        }
    }
    for (k, p) in points.iter_mut().enumerate() {
        p.copy_from_slice(&flat[k * dim..(k + 1) * dim]);
    }
    Ok(())
}

/// Insert the duplicate dictated by the projection `Phi^l_{ij}` read
/// forward: the current `l - 1` points occupy the slots `0..l` minus `j`;
/// slot `j` is filled with a copy of slot `i`'s point.
pub(crate) fn duplicate_insert(points: &mut Vec<Vec<f64>>, i: usize, j: usize) {
    let idx_i = if i < j { i } else { i - 1 };
    let copy = points[idx_i].clone();
    points.insert(j, copy);
}

/// One replicate of the forward-duplication estimator on a given chain.
pub(crate) fn evaluate_replicate(
    f: &DualFunction,
    m: usize,
    chain: &DualRun,
    initial_points: Vec<Vec<f64>>,
    total_mass: f64,
    sampler: &NoiseSampler,
    dim: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    debug_assert_eq!(initial_points.len(), chain.j_final);
    let mut points = initial_points;
    let t = chain.horizon;
    let k = chain.jump_times.len();
    // Segment from the latest jump (or 0) to the horizon, then walk the
    // jumps backwards, duplicating and diffusing each inter-jump interval.
    let last_jump = chain.jump_times.last().copied().unwrap_or(0.0);
    diffuse_segment(sampler, dim, &mut points, t - last_jump, dt, rng)?;
    for kappa in (0..k).rev() {
        let (i, j) = chain.pairs[kappa];
        duplicate_insert(&mut points, i, j);
        let prev = if kappa == 0 { 0.0 } else { chain.jump_times[kappa - 1] };
        diffuse_segment(sampler, dim, &mut points, chain.jump_times[kappa] - prev, dt, rng)?;
    }
    debug_assert_eq!(points.len(), m);
    let fval = f.evaluate(&points);
    Ok(fval * chain.weight * total_mass.powi(chain.j_final as i32))
}

/// Monte Carlo estimate of `E <f, mu_t^m>` through the dual process.
pub fn dual_moment(
    f: &DualFunction,
    m: usize,
    mu0: &Mu0Spec,
    model: &ModelCoefficients,
    config: &DualMomentConfig,
    factory: &RngFactory,
) -> Result<DualEstimate> {
    if m == 0 {
        return Err(SdsmError::Config(
            "dual moments need m >= 1 (J_0 = 0 has no simulation meaning)".into(),
        ));
    }
    let total_mass = mu0.total_mass();
    let gs2 = model.gamma * model.offspring.sigma_sq();
    let sampler = NoiseSampler::new(model, config.noise_mode);
    let dim = model.d;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut accepted = 0u64;
    let mut rejected = 0u64;
    let mut j_sum = 0.0;
    for rep in 0..config.reps {
        let mut rng = factory.substream(StreamKind::Dual, rep, 0);
        let chain = sample_jump_chain(m, config.t, gs2, &mut rng);
        j_sum += chain.j_final as f64;
        let initial: Vec<Vec<f64>> =
            (0..chain.j_final).map(|_| mu0.sample_position(&mut rng)).collect();
        let v = evaluate_replicate(
            f,
            m,
            &chain,
            initial,
            total_mass,
            &sampler,
            dim,
            config.dt,
            &mut rng,
        )?;
        if v.is_finite() {
            sum += v;
            sumsq += v * v;
            accepted += 1;
        } else {
            rejected += 1;
        }
    }
    if accepted == 0 {
        return Err(SdsmError::Config("all dual replicates rejected".into()));
    }
    let n = accepted as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(DualEstimate {
        estimate: mean,
        se: (var / n).sqrt(),
        reps: accepted,
        rejected,
        mean_j_final: j_sum / config.reps as f64,
    })
}

/// A labelled moment estimate for cross-checking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelledEstimate {
    /// Configuration id (model + mu0 + horizon + observable).
    pub config_id: String,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossCheckReport {
    pub config_id: String,
    pub particle_value: f64,
    pub dual_value: f64,
    pub z: f64,
    pub flagged: bool,
}

/// Two-sample z-score between the particle-side and dual-side estimates;
/// flags `|z| > 3`.
pub fn cross_check(
    particle: &LabelledEstimate,
    dual: &LabelledEstimate,
) -> Result<CrossCheckReport> {
    if particle.config_id != dual.config_id {
        return Err(SdsmError::MismatchedConfig(
            particle.config_id.clone(),
            dual.config_id.clone(),
        ));
    }
    let se = (particle.se * particle.se + dual.se * dual.se).sqrt();
    let z = if se == 0.0 {
        if particle.value == dual.value {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (particle.value - dual.value) / se
    };
    Ok(CrossCheckReport {
        config_id: particle.config_id.clone(),
        particle_value: particle.value,
        dual_value: dual.value,
        z,
        flagged: z.abs() > 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> ModelCoefficients {
        ModelCoefficients::reference()
    }

    #[test]
    fn frozen_levels() {
        let factory = RngFactory::new(1);
        let mut rng = factory.substream(StreamKind::Dual, 0, 0);
        let run = sample_jump_chain(1, 5.0, 1.0, &mut rng);
        assert!(run.jump_times.is_empty());
        assert_eq!(run.j_final, 1);
        assert_eq!(run.weight, 1.0);
    }

    #[test]
    fn no_jump_probability_level_two() {
        // Rate at level 2 is gamma sigma^2 * 1; P(no jump by t) = e^{-t}.
        let factory = RngFactory::new(4);
        let t = 0.7;
        let n = 100_000;
        let mut none = 0u64;
        for rep in 0..n {
            let mut rng = factory.substream(StreamKind::Dual, rep, 0);
            let run = sample_jump_chain(2, t, 1.0, &mut rng);
            if run.jump_times.is_empty() {
                none += 1;
            }
        }
        let p = none as f64 / n as f64;
        let expect = (-t as f64).exp();
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((p - expect).abs() < 3.0 * se, "p {p}, expect {expect}");
    }

    #[test]
    fn mean_absorption_time_from_three() {
        // Rates 3 and 1: mean time to reach level 1 is 1/3 + 1 = 4/3.
        let factory = RngFactory::new(6);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for rep in 0..n {
            let mut rng = factory.substream(StreamKind::Dual, rep, 0);
            let run = sample_jump_chain(3, 1e9, 1.0, &mut rng);
            let t1 = *run.jump_times.last().unwrap();
            sum += t1;
            sumsq += t1 * t1;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - 4.0 / 3.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn weight_recomputation_is_bit_identical() {
        let factory = RngFactory::new(10);
        for rep in 0..200 {
            let mut rng = factory.substream(StreamKind::Dual, rep, 0);
            let run = sample_jump_chain(5, 0.8, 1.7, &mut rng);
            let re = weight_from_sojourns(5, &run.jump_times, 0.8, 1.7);
            assert_eq!(run.weight.to_bits(), re.to_bits());
            assert!(run.weight >= 1.0);
        }
    }

    #[test]
    fn duplication_bookkeeping() {
        // Each insert grows the set by one; slots follow the projection.
        let mut pts = vec![vec![10.0], vec![20.0], vec![30.0]];
        // Level 4, pair (i=1, j=3): slot 3 is a copy of slot 1.
        duplicate_insert(&mut pts, 1, 3);
        assert_eq!(pts, vec![vec![10.0], vec![20.0], vec![30.0], vec![20.0]]);
        // Level 5, pair (i=4, j=0): slot 0 copies (current) slot 4.
        duplicate_insert(&mut pts, 4, 0);
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[0], vec![20.0]);
    }

    #[test]
    fn zero_horizon_recovers_initial_moment() {
        // t = 0: no jumps contribute, weight = 1, f == 1, m = 2, |mu0| = 1.
        let model = reference();
        let cfg = DualMomentConfig { t: 0.0, reps: 50, dt: 0.01, noise_mode: NoiseMode::Direct };
        let est = dual_moment(
            &DualFunction::Constant(1.0),
            2,
            &Mu0Spec::unit_point_mass(1),
            &model,
            &cfg,
            &RngFactory::new(2),
        )
        .unwrap();
        assert_eq!(est.estimate, 1.0);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn second_moment_of_total_mass() {
        // E<1, mu_t>^2 = 1 + gamma sigma^2 t for unit initial mass.
        let model = reference();
        let t = 0.5;
        let cfg = DualMomentConfig {
            t,
            reps: 40_000,
            dt: t / 16.0,
            noise_mode: NoiseMode::Direct,
        };
        let est = dual_moment(
            &DualFunction::Constant(1.0),
            2,
            &Mu0Spec::unit_point_mass(1),
            &model,
            &cfg,
            &RngFactory::new(12),
        )
        .unwrap();
        assert!(
            (est.estimate - 1.5).abs() < 3.0 * est.se,
            "estimate {} se {}",
            est.estimate,
            est.se
        );
    }

    #[test]
    fn first_moment_is_the_semigroup_average() {
        // m = 1 reduces to <P_t phi, mu_0>; reference model, phi Gaussian,
        // t = 0.5: the analytic value is 1/sqrt(2).
        let model = reference();
        let phi = TestFunction::GaussianBump { center: vec![0.0], width: 1.0, amplitude: 1.0 };
        let cfg = DualMomentConfig {
            t: 0.5,
            reps: 4000,
            dt: 0.5 / 64.0,
            noise_mode: NoiseMode::Direct,
        };
        let est = dual_moment(
            &DualFunction::Product(phi),
            1,
            &Mu0Spec::unit_point_mass(1),
            &model,
            &cfg,
            &RngFactory::new(3),
        )
        .unwrap();
        let oracle = std::f64::consts::FRAC_1_SQRT_2;
        assert!(
            (est.estimate - oracle).abs() < 3.0 * est.se,
            "estimate {} se {} oracle {oracle}",
            est.estimate,
            est.se
        );
    }

    #[test]
    fn exchangeability_of_the_initial_sample() {
        // For symmetric f, reversing each replicate's initial sample does
        // not change the estimator's law: compare ensemble means.
        let model = reference();
        let phi = TestFunction::GaussianBump { center: vec![0.0], width: 1.0, amplitude: 1.0 };
        let f = DualFunction::Product(phi);
        let sampler = NoiseSampler::new(&model, NoiseMode::Direct);
        let factory = RngFactory::new(8);
        let mu0 = Mu0Spec::Gaussian { mean: vec![0.0], std: 1.0, total_mass: 1.0 };
        let t = 0.4;
        let mut means = [0.0f64; 2];
        let mut vars = [0.0f64; 2];
        let n = 3000u64;
        for (variant, reverse) in [(0usize, false), (1usize, true)] {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for rep in 0..n {
                let mut rng = factory.substream(StreamKind::Dual, rep, 0);
                let chain = sample_jump_chain(2, t, 1.0, &mut rng);
                let mut pts: Vec<Vec<f64>> =
                    (0..chain.j_final).map(|_| mu0.sample_position(&mut rng)).collect();
                if reverse {
                    pts.reverse();
                }
                let v = evaluate_replicate(&f, 2, &chain, pts, 1.0, &sampler, 1, 0.05, &mut rng)
                    .unwrap();
                sum += v;
                sumsq += v * v;
            }
            means[variant] = sum / n as f64;
            vars[variant] = sumsq / n as f64 - means[variant] * means[variant];
        }
        let se = ((vars[0] + vars[1]) / n as f64).sqrt();
        assert!(
            (means[0] - means[1]).abs() < 3.0 * se,
            "means {means:?}, se {se}"
        );
    }

    #[test]
    fn cross_check_flags() {
        let a = LabelledEstimate { config_id: "ref".into(), value: 1.0, se: 0.01 };
        let good = LabelledEstimate { config_id: "ref".into(), value: 1.02, se: 0.01 };
        let rep = cross_check(&a, &good).unwrap();
        assert!(!rep.flagged, "z = {}", rep.z);
        // +10 SE corruption must be flagged.
        let bad = LabelledEstimate { config_id: "ref".into(), value: 1.0 + 0.1 * 2f64.sqrt(), se: 0.01 };
        assert!(cross_check(&a, &bad).unwrap().flagged);
        let other = LabelledEstimate { config_id: "other".into(), value: 1.0, se: 0.01 };
        assert!(matches!(
            cross_check(&a, &other),
            Err(SdsmError::MismatchedConfig(_, _))
        ));
    }

    #[test]
    fn rejects_m_zero() {
        let model = reference();
        let cfg = DualMomentConfig { t: 0.1, reps: 1, dt: 0.01, noise_mode: NoiseMode::Direct };
        assert!(dual_moment(
            &DualFunction::Constant(1.0),
            0,
            &Mu0Spec::unit_point_mass(1),
            &model,
            &cfg,
            &RngFactory::new(1),
        )
        .is_err());
    }
}
