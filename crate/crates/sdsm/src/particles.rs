//! The interacting branching particle system and its path record.
//!
//! Stage-n particles carry mass `1/theta^n`, diffuse by correlated Euler
//! steps (see [`crate::noise`]) and branch independently at rate
//! `gamma theta^n`: over a step of length `dt` each particle branches with
//! probability `1 - exp(-gamma theta^n dt)`, drawing its offspring count
//! from the critical law and leaving the children at its death position.
//!
//! Along the way the stepper maintains, for every registered observable
//! `phi`, the pieces of the semimartingale decomposition of
//! `<phi, mu_t>`: the common-noise martingale `X_t(phi)`, the branching
//! martingale `M_t(phi)`, the individual-Brownian martingale `I_t(phi)`
//! (the finite-n term that vanishes like `theta^{-n/2}` in the limit), the
//! left-endpoint Riemann sum of `<G_1 phi, mu_s> ds`, and the trapezoidal
//! occupation integrals of `phi` and `phi^2`.

use crate::error::{Result, SdsmError};
use crate::model::{check_ellipticity, ModelCoefficients};
use crate::noise::{NoiseMode, NoiseSampler};
use crate::rng::{RngFactory, StreamKind};
use crate::testfn::{ObservableSpec, TestFunction, MAX_DIM};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Initial-measure descriptor: a finite measure on R^d.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mu0Spec {
    PointMasses { points: Vec<(Vec<f64>, f64)> },
    Gaussian { mean: Vec<f64>, std: f64, total_mass: f64 },
    UniformBox { lo: Vec<f64>, hi: Vec<f64>, total_mass: f64 },
}

impl Mu0Spec {
    pub fn unit_point_mass(dim: usize) -> Self {
        Mu0Spec::PointMasses { points: vec![(vec![0.0; dim], 1.0)] }
    }

    pub fn total_mass(&self) -> f64 {
        match self {
            Mu0Spec::PointMasses { points } => points.iter().map(|(_, m)| m).sum(),
            Mu0Spec::Gaussian { total_mass, .. } => *total_mass,
            Mu0Spec::UniformBox { total_mass, .. } => *total_mass,
        }
    }

    /// Sample one point from the normalized measure.
    pub fn sample_position<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Mu0Spec::PointMasses { points } => {
                let total: f64 = points.iter().map(|(_, m)| m).sum();
                let mut u: f64 = rng.gen::<f64>() * total;
                for (pos, m) in points {
                    if u < *m {
                        return pos.clone();
                    }
                    u -= m;
                }
                points.last().expect("nonempty point list").0.clone()
            }
            Mu0Spec::Gaussian { mean, std, .. } => mean
                .iter()
                .map(|&mu| mu + std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect(),
            Mu0Spec::UniformBox { lo, hi, .. } => lo
                .iter()
                .zip(hi)
                .map(|(&a, &b)| a + (b - a) * rng.gen::<f64>())
                .collect(),
        }
    }
}

/// Simulation configuration for one particle-system run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    pub theta: f64,
    pub n: u32,
    /// Store full particle snapshots every `snapshot_stride` steps.
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
    #[serde(default)]
    pub store_snapshots: bool,
    #[serde(default)]
    pub record_events: bool,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    /// Diagnostic escape hatch: skip the ellipticity gate (frozen-particle
    /// tests with c = 0, h = 0).
    #[serde(default)]
    pub allow_degenerate: bool,
    /// Attach multi-index lineage labels (diagnostics only).
    #[serde(default)]
    pub lineage: bool,
}

fn default_stride() -> usize {
    1
}

impl SimConfig {
    pub fn scaling(&self) -> f64 {
        self.theta.powi(self.n as i32)
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self, model: &ModelCoefficients) -> Result<()> {
        if self.dt <= 0.0 || self.t_end < 0.0 {
            return Err(SdsmError::Config("need dt > 0 and t_end >= 0".into()));
        }
        if self.theta <= 1.0 {
            return Err(SdsmError::Config("need theta > 1".into()));
        }
        let cap = model.gamma * self.scaling() * self.dt;
        if cap > 0.1 + 1e-12 {
            return Err(SdsmError::Config(format!(
                "branching-per-step cap violated: gamma theta^n dt = {cap:.4} > 0.1"
            )));
        }
        if self.steps() >= 1 << 24 {
            return Err(SdsmError::Config("more than 2^24 steps per replicate".into()));
        }
        if (self.steps() as f64 * self.dt - self.t_end).abs() > 1e-9 * self.t_end.max(1.0) {
            return Err(SdsmError::Config(format!(
                "t_end = {} is not an integer number of dt = {} steps",
                self.t_end, self.dt
            )));
        }
        Ok(())
    }
}

/// How much bookkeeping an observable carries per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    /// Value recorded at snapshot times only; no martingale accumulators.
    ValueOnly,
    /// Trapezoidal occupation integrals every step, no martingale terms.
    Occupation,
    /// All accumulators updated every step.
    #[default]
    Full,
}

#[derive(Debug, Clone)]
pub struct Observable {
    pub id: String,
    pub f: TestFunction,
    pub track: Track,
}

impl Observable {
    pub fn full(id: impl Into<String>, f: TestFunction) -> Self {
        Self { id: id.into(), f, track: Track::Full }
    }

    pub fn value_only(id: impl Into<String>, f: TestFunction) -> Self {
        Self { id: id.into(), f, track: Track::ValueOnly }
    }

    /// Resolve a serialized spec against the model (the kernel-type
    /// observables need the effective diffusion).
    pub fn from_spec(
        id: impl Into<String>,
        spec: &ObservableSpec,
        model: &ModelCoefficients,
        track: Track,
    ) -> Result<Self> {
        let f = match spec {
            ObservableSpec::GaussianBump { center, width } => TestFunction::GaussianBump {
                center: center.clone(),
                width: *width,
                amplitude: 1.0,
            },
            ObservableSpec::Constant { value } => TestFunction::Constant { value: *value },
            ObservableSpec::WeightedPoly { axis, coeffs, a } => {
                TestFunction::WeightedPoly { axis: *axis, coeffs: *coeffs, a: *a }
            }
            ObservableSpec::CompactBump { center, radius } => {
                TestFunction::CompactBump { center: center.clone(), radius: *radius }
            }
            ObservableSpec::HeatKernelAt { x, eps } => {
                let sigma_sq = model.sigma0_sq()?;
                let v = sigma_sq * eps;
                TestFunction::GaussianBump {
                    center: x.clone(),
                    width: v.sqrt(),
                    amplitude: (2.0 * std::f64::consts::PI * v).powf(-(model.d as f64) / 2.0),
                }
            }
            ObservableSpec::ResolventKernelAt { x, lambda, eps } => {
                let sigma_sq = model.sigma0_sq()?;
                let spec = crate::green::KernelSpec::new(*lambda, *eps, sigma_sq, model.d)?;
                let table = crate::green::KernelTable::build(&spec, 16.0, 2e-3)?;
                TestFunction::ResolventKernel {
                    center: x.clone(),
                    table: std::sync::Arc::new(table),
                }
            }
        };
        Ok(Self { id: id.into(), f, track })
    }
}

/// Positions plus the scaling bookkeeping of the empirical measure.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub dim: usize,
    /// Flat `[alive * dim]` positions.
    pub positions: Vec<f64>,
    /// `1 / theta^n`, the common particle mass.
    pub mass: f64,
    pub theta: f64,
    pub n: u32,
    pub time: f64,
    /// Optional multi-index labels, one per alive particle.
    pub lineage: Option<Vec<String>>,
}

impl ParticleCloud {
    pub fn alive(&self) -> usize {
        self.positions.len() / self.dim
    }

    /// `<1, mu_t>`.
    pub fn total_mass(&self) -> f64 {
        self.alive() as f64 * self.mass
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    /// `<phi, mu_t>`.
    pub fn integrate(&self, f: &TestFunction) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.alive() {
            acc += f.value(self.position(k));
        }
        acc * self.mass
    }
}

/// Draw the initial cloud: `round(total mass * theta^n)` particles i.i.d.
/// from the normalized initial measure, each with mass `theta^{-n}`.
pub fn init_cloud(
    mu0: &Mu0Spec,
    theta: f64,
    n: u32,
    dim: usize,
    lineage: bool,
    rng: &mut ChaCha8Rng,
) -> ParticleCloud {
    let scaling = theta.powi(n as i32);
    let count = (mu0.total_mass() * scaling).round() as usize;
    let mut positions = Vec::with_capacity(count * dim);
    for _ in 0..count {
        positions.extend(mu0.sample_position(rng));
    }
    ParticleCloud {
        dim,
        positions,
        mass: 1.0 / scaling,
        theta,
        n,
        time: 0.0,
        lineage: lineage.then(|| (1..=count).map(|i| i.to_string()).collect()),
    }
}

/// One point of the per-observable series.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq)]
pub struct SeriesPoint {
    pub time: f64,
    /// `<phi, mu_t>`.
    pub value: f64,
    /// Common-noise martingale `X_t(phi)`.
    pub x_mart: f64,
    /// Branching martingale `M_t(phi)`.
    pub m_mart: f64,
    /// Individual-Brownian martingale (finite-n term).
    pub i_mart: f64,
    /// Left-endpoint Riemann sum of `int <G_1 phi, mu_s> ds`.
    pub g1_riemann: f64,
    /// Trapezoidal `int <phi, mu_s> ds`.
    pub occ_trap: f64,
    /// Trapezoidal `int <phi^2, mu_s> ds`.
    pub sq_trap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub id: String,
    pub points: Vec<SeriesPoint>,
}

impl ObservableSeries {
    pub fn last(&self) -> &SeriesPoint {
        self.points.last().expect("series has at least the initial point")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub positions: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchEvent {
    pub time: f64,
    pub position: Vec<f64>,
    pub offspring: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRecord {
    pub dim: usize,
    pub mass: f64,
    pub dt: f64,
    pub series: Vec<ObservableSeries>,
    pub snapshots: Vec<Snapshot>,
    pub events: Option<Vec<BranchEvent>>,
    pub final_alive: usize,
}

impl PathRecord {
    pub fn series_for(&self, id: &str) -> Result<&ObservableSeries> {
        self.series
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| SdsmError::UnknownObservable(id.to_string()))
    }
}

/// Trapezoidal occupation integral `int_0^T <phi, mu_s> ds` of a recorded
/// observable.
pub fn occupation_integral(record: &PathRecord, id: &str) -> Result<f64> {
    Ok(record.series_for(id)?.last().occ_trap)
}

struct AccState {
    value: f64,
    sq: f64,
    point: SeriesPoint,
}

/// The stepping engine for one replicate.
pub struct Simulator<'m> {
    model: &'m ModelCoefficients,
    config: SimConfig,
    sampler: NoiseSampler,
    observables: Vec<Observable>,
    /// `G_1` contraction weights: (a_pq + rho_pq(0)) / 2.
    g1_weights: Vec<f64>,
    branch_prob: f64,
}

impl<'m> Simulator<'m> {
    pub fn new(
        model: &'m ModelCoefficients,
        config: SimConfig,
        observables: Vec<Observable>,
    ) -> Result<Self> {
        config.validate(model)?;
        let d = model.d;
        let rho0 = model.rho(&vec![0.0; d])?;
        let a = model.c.a_scalar();
        let mut g1_weights = vec![0.0; d * d];
        for p in 0..d {
            for q in 0..d {
                g1_weights[p * d + q] =
                    0.5 * (rho0[(p, q)] + if p == q { a } else { 0.0 });
            }
        }
        let branch_rate = model.gamma * config.scaling();
        let branch_prob = 1.0 - (-branch_rate * config.dt).exp();
        Ok(Self {
            sampler: NoiseSampler::new(model, config.noise_mode),
            model,
            config,
            observables,
            g1_weights,
            branch_prob,
        })
    }

    pub fn observables(&self) -> &[Observable] {
        &self.observables
    }

    /// Run one replicate to the horizon.
    pub fn run(&self, mu0: &Mu0Spec, factory: &RngFactory, replicate: u64) -> Result<PathRecord> {
        let mut init_rng = factory.substream(StreamKind::Init, replicate, 0);
        let mut cloud = init_cloud(
            mu0,
            self.config.theta,
            self.config.n,
            self.model.d,
            self.config.lineage,
            &mut init_rng,
        );
        if !self.config.allow_degenerate {
            self.ellipticity_gate(&cloud)?;
        }
        let steps = self.config.steps();
        let d = self.model.d;
        let mut accs: Vec<AccState> = self
            .observables
            .iter()
            .map(|obs| {
                let value = cloud.integrate(&obs.f);
                let sq = self.integrate_sq(&cloud, &obs.f);
                AccState {
                    value,
                    sq,
                    point: SeriesPoint { time: 0.0, value, ..Default::default() },
                }
            })
            .collect();
        let mut record = PathRecord {
            dim: d,
            mass: cloud.mass,
            dt: self.config.dt,
            series: self
                .observables
                .iter()
                .zip(&accs)
                .map(|(obs, acc)| ObservableSeries { id: obs.id.clone(), points: vec![acc.point] })
                .collect(),
            snapshots: Vec::new(),
            events: self.config.record_events.then(Vec::new),
            final_alive: cloud.alive(),
        };
        if self.config.store_snapshots {
            record
                .snapshots
                .push(Snapshot { time: 0.0, positions: cloud.positions.clone() });
        }
        let mut common = Vec::new();
        let mut individual = Vec::new();
        for step in 0..steps {
            let mut rng = factory.substream(StreamKind::Simulation, replicate, step as u64);
            self.advance(
                &mut cloud,
                &mut accs,
                &mut rng,
                &mut common,
                &mut individual,
                record.events.as_mut(),
            )?;
            let at_snapshot = self.config.snapshot_stride > 0
                && (step + 1) % self.config.snapshot_stride == 0;
            if at_snapshot || step + 1 == steps {
                for ((obs, series), acc) in self
                    .observables
                    .iter()
                    .zip(record.series.iter_mut())
                    .zip(accs.iter_mut())
                {
                    if obs.track == Track::ValueOnly {
                        acc.point.value = cloud.integrate(&obs.f);
                    }
                    series.points.push(acc.point);
                }
                if self.config.store_snapshots {
                    record
                        .snapshots
                        .push(Snapshot { time: cloud.time, positions: cloud.positions.clone() });
                }
            }
        }
        record.final_alive = cloud.alive();
        Ok(record)
    }

    fn ellipticity_gate(&self, cloud: &ParticleCloud) -> Result<()> {
        // Gamma is the sum of the individual PSD part and the medium PSD
        // part, so a strictly positive individual diffusion already bounds
        // the spectrum below; otherwise fall back to the eigen check on a
        // bounded number of particles.
        if self.model.c.a_scalar() > 0.0 {
            return Ok(());
        }
        let probe = cloud.alive().min(64);
        if probe == 0 {
            return Ok(());
        }
        check_ellipticity(self.model, &cloud.positions[..probe * self.model.d])?;
        Ok(())
    }

    fn integrate_sq(&self, cloud: &ParticleCloud, f: &TestFunction) -> f64 {
        let mut acc = 0.0;
        for k in 0..cloud.alive() {
            let v = f.value(cloud.position(k));
            acc += v * v;
        }
        acc * cloud.mass
    }

    /// One diffusion-plus-branching step.
    fn advance(
        &self,
        cloud: &mut ParticleCloud,
        accs: &mut [AccState],
        rng: &mut ChaCha8Rng,
        common: &mut Vec<f64>,
        individual: &mut Vec<f64>,
        mut events: Option<&mut Vec<BranchEvent>>,
    ) -> Result<()> {
        let d = cloud.dim;
        let m = cloud.alive();
        let dt = self.config.dt;
        let mass = cloud.mass;
        common.resize(m * d, 0.0);
        individual.resize(m * d, 0.0);
        self.sampler.fill_common(&cloud.positions, dt, rng, common)?;
        self.sampler.fill_individual(dt, rng, individual);

        // Pre-move pass: left-endpoint accumulators for full observables.
        let mut grad = [0.0; MAX_DIM];
        let mut hess = [0.0; MAX_DIM * MAX_DIM];
        for (obs, acc) in self.observables.iter().zip(accs.iter_mut()) {
            if obs.track != Track::Full {
                continue;
            }
            let mut dx = 0.0;
            let mut di = 0.0;
            let mut dg = 0.0;
            let grad_zero = obs.f.gradient_is_zero();
            for k in 0..m {
                let x = &cloud.positions[k * d..(k + 1) * d];
                if !grad_zero {
                    obs.f.gradient(x, &mut grad[..d]);
                    for p in 0..d {
                        dx += grad[p] * common[k * d + p];
                        di += grad[p] * individual[k * d + p];
                    }
                }
                obs.f.hessian(x, &mut hess[..d * d]);
                let mut g1 = 0.0;
                for p in 0..d {
                    for q in 0..d {
                        g1 += self.g1_weights[p * d + q] * hess[p * d + q];
                    }
                }
                dg += g1;
            }
            acc.point.x_mart += mass * dx;
            acc.point.i_mart += mass * di;
            acc.point.g1_riemann += mass * dg * dt;
        }

        // Move.
        for (pos, (c, i)) in cloud
            .positions
            .iter_mut()
            .zip(common.iter().zip(individual.iter()))
        {
            *pos += c + i;
        }

        // Branching substep on the post-move positions. Offspring join at
        // the end of the array and do not branch again this step.
        if self.branch_prob > 0.0 && m > 0 {
            let mut dead: Vec<usize> = Vec::new();
            let log_q = (1.0 - self.branch_prob).ln();
            let mut k = skip_ahead(rng, log_q);
            let t_now = cloud.time + dt;
            while k < m {
                let o = self.model.offspring.sample_from_uniform(rng.gen::<f64>());
                let x_start = k * d;
                if o == 0 {
                    dead.push(k);
                } else {
                    for _ in 1..o {
                        for p in 0..d {
                            let v = cloud.positions[x_start + p];
                            cloud.positions.push(v);
                        }
                        if let Some(lin) = cloud.lineage.as_mut() {
                            let tag = format!("{}+{}", lin[k], lin.len());
                            lin.push(tag);
                        }
                    }
                }
                let x = cloud.positions[x_start..x_start + d].to_vec();
                for (obs, acc) in self.observables.iter().zip(accs.iter_mut()) {
                    if obs.track == Track::Full {
                        acc.point.m_mart += (o as f64 - 1.0) * mass * obs.f.value(&x);
                    }
                }
                if let Some(ev) = events.as_deref_mut() {
                    ev.push(BranchEvent { time: t_now, position: x, offspring: o });
                }
                k += 1 + skip_ahead(rng, log_q);
            }
            if !dead.is_empty() {
                retain_alive(&mut cloud.positions, d, &dead);
                if let Some(lin) = cloud.lineage.as_mut() {
                    let mut keep = vec![true; lin.len()];
                    for &k in &dead {
                        keep[k] = false;
                    }
                    let mut it = keep.iter();
                    lin.retain(|_| *it.next().unwrap());
                }
            }
        }

        cloud.time += dt;

        // Post-step values and trapezoidal integrals.
        for (obs, acc) in self.observables.iter().zip(accs.iter_mut()) {
            if obs.track != Track::ValueOnly {
                let (mut v, mut s) = (0.0, 0.0);
                for k in 0..cloud.alive() {
                    let fv = obs.f.value(cloud.position(k));
                    v += fv;
                    s += fv * fv;
                }
                let v = v * mass;
                let s = s * mass;
                acc.point.occ_trap += 0.5 * (acc.value + v) * dt;
                acc.point.sq_trap += 0.5 * (acc.sq + s) * dt;
                acc.value = v;
                acc.sq = s;
                acc.point.value = v;
            }
            // Value-only observables are evaluated lazily at record times.
            acc.point.time = cloud.time;
        }
        Ok(())
    }
}

/// Geometric gap between branching particles under per-particle probability
/// `p = 1 - e^{log_q}`; draws one uniform instead of one per particle.
#[inline]
fn skip_ahead(rng: &mut ChaCha8Rng, log_q: f64) -> usize {
    if log_q == f64::NEG_INFINITY {
        return 0; // p = 1: every particle branches
    }
    let u: f64 = rng.gen::<f64>();
    let u = if u <= 0.0 { f64::MIN_POSITIVE } else { u };
    let g = (u.ln() / log_q).floor();
    if g > 1e17 {
        usize::MAX / 4
    } else {
        g as usize
    }
}

/// Stable compaction dropping the (sorted) dead indices.
fn retain_alive(positions: &mut Vec<f64>, d: usize, dead: &[usize]) {
    let mut write = 0usize;
    let mut dead_iter = dead.iter().peekable();
    let m = positions.len() / d;
    for k in 0..m {
        if dead_iter.peek() == Some(&&k) {
            dead_iter.next();
            continue;
        }
        if write != k {
            let (a, b) = positions.split_at_mut(k * d);
            a[write * d..write * d + d].copy_from_slice(&b[..d]);
        }
        write += 1;
    }
    positions.truncate(write * d);
}

/// Run `replicates` independent replicates, optionally in parallel, and
/// return their records in replicate order (deterministic regardless of the
/// worker count).
pub fn run_ensemble(
    model: &ModelCoefficients,
    mu0: &Mu0Spec,
    config: &SimConfig,
    observables: &[Observable],
    factory: &RngFactory,
    replicates: u64,
    workers: usize,
) -> Result<Vec<PathRecord>> {
    let sim = Simulator::new(model, config.clone(), observables.to_vec())?;
    if workers <= 1 {
        (0..replicates).map(|r| sim.run(mu0, factory, r)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SdsmError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            (0..replicates)
                .into_par_iter()
                .map(|r| sim.run(mu0, factory, r))
                .collect()
        })
    }
}
