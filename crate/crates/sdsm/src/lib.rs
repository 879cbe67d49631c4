//! Monte Carlo machinery for superprocesses with dependent spatial motion:
//! an interacting branching particle system whose particles share a common
//! Gaussian random medium on top of their individual Brownian motions.
//!
//! The crate has three layers:
//!
//! * simulation — [`model`] (coefficients, interaction covariance,
//!   ellipticity), [`noise`] (exact correlated-displacement sampling without
//!   discretizing the Brownian sheet), [`particles`] (branching Euler
//!   stepper with martingale accumulators);
//! * analytics — [`green`] (heat/resolvent/perturbed kernels and their
//!   integrability checks), [`localtime`] (mollified occupation densities
//!   and the Tanaka decomposition), [`dual`] (the moment-duality estimator);
//! * validation — [`validate`] (the statistical check suite), [`stats`],
//!   [`config`] and [`output`] (manifests, CSV series, snapshot containers).
//!
//! The `book/` directory of the repository walks through the same material
//! chapter by chapter; its code snippets compile as doctests of this crate.

pub mod bessel;
pub mod config;
pub mod dual;
pub mod error;
pub mod green;
pub mod localtime;
pub mod model;
pub mod noise;
pub mod output;
pub mod particles;
pub mod quad;
pub mod rng;
pub mod stats;
pub mod testfn;
pub mod validate;

pub use error::{Result, SdsmError};
pub use model::{CFamily, GammaMatrix, HFamily, ModelCoefficients, OffspringLaw};
pub use noise::{NoiseMode, NoiseSampler, StepIncrement};
pub use particles::{
    init_cloud, occupation_integral, run_ensemble, Mu0Spec, Observable, ParticleCloud, PathRecord,
    SimConfig, Simulator, Track,
};
pub use testfn::{ObservableSpec, TestFunction};
