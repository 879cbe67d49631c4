//! Run manifests and JSON configuration loading.
//!
//! A run manifest binds together a model (inline or by file reference), an
//! initial measure, the simulation parameters, the observable registrations
//! and the master seed; resolving it validates everything the simulator
//! relies on (criticality, ellipticity-friendly coefficients, the
//! branching-per-step cap) before any work starts.

use crate::error::{Result, SdsmError};
use crate::model::ModelCoefficients;
use crate::particles::{Mu0Spec, Observable, SimConfig, Track};
use crate::testfn::ObservableSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObservableEntry {
    pub id: String,
    #[serde(flatten)]
    pub spec: ObservableSpec,
    #[serde(default)]
    pub track: Track,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Inline model definition...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelCoefficients>,
    /// ...or a path to a JSON file holding one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    pub mu0: Mu0Spec,
    pub sim: SimConfig,
    #[serde(default)]
    pub observables: Vec<ObservableEntry>,
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_replicates() -> u64 {
    1
}

impl RunManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SdsmError::Config(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let mut manifest: RunManifest = serde_json::from_str(&text)?;
        resolve_relative(&mut manifest.model_path, path);
        Ok(manifest)
    }

    /// Load the model (inline or referenced) and validate it.
    pub fn resolve_model(&self) -> Result<ModelCoefficients> {
        let model = match (&self.model, &self.model_path) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    SdsmError::Config(format!("cannot read model {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)?
            }
            (None, None) => {
                return Err(SdsmError::Config("manifest has neither model nor model_path".into()))
            }
        };
        model.validate()?;
        Ok(model)
    }

    /// Validate the whole manifest and build the observable list.
    pub fn resolve(&self) -> Result<(ModelCoefficients, Vec<Observable>)> {
        let model = self.resolve_model()?;
        self.sim.validate(&model)?;
        if model.d != mu0_dim(&self.mu0) {
            return Err(SdsmError::Config(format!(
                "model dimension {} does not match the initial-measure dimension {}",
                model.d,
                mu0_dim(&self.mu0)
            )));
        }
        let mut observables = Vec::with_capacity(self.observables.len());
        for entry in &self.observables {
            observables.push(Observable::from_spec(&entry.id, &entry.spec, &model, entry.track)?);
        }
        Ok((model, observables))
    }

    /// Inline the referenced model so the written copy is self-contained.
    pub fn resolved_copy(&self) -> Result<RunManifest> {
        let mut copy = self.clone();
        copy.model = Some(self.resolve_model()?);
        copy.model_path = None;
        Ok(copy)
    }
}

fn mu0_dim(mu0: &Mu0Spec) -> usize {
    match mu0 {
        Mu0Spec::PointMasses { points } => points.first().map_or(0, |(p, _)| p.len()),
        Mu0Spec::Gaussian { mean, .. } => mean.len(),
        Mu0Spec::UniformBox { lo, .. } => lo.len(),
    }
}

/// One requested dual-moment estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualTarget {
    pub id: String,
    pub m: usize,
    /// Product observable `phi` with `f = phi (x) ... (x) phi`; absent means
    /// `f == 1` (pure mass moments).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<ObservableSpec>,
}

/// Manifest for the dual-moment subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelCoefficients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    pub mu0: Mu0Spec,
    pub t: f64,
    /// Euler step for the diffusion segments.
    pub dt: f64,
    pub reps: u64,
    pub seed: u64,
    pub targets: Vec<DualTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn resolve_relative(model_path: &mut Option<PathBuf>, manifest_path: &Path) {
    if let Some(rel) = model_path {
        if rel.is_relative() {
            if let Some(dir) = manifest_path.parent() {
                *model_path = Some(dir.join(&rel));
            }
        }
    }
}

impl DualManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SdsmError::Config(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let mut manifest: DualManifest = serde_json::from_str(&text)?;
        resolve_relative(&mut manifest.model_path, path);
        Ok(manifest)
    }

    pub fn resolve_model(&self) -> Result<ModelCoefficients> {
        let model = match (&self.model, &self.model_path) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    SdsmError::Config(format!("cannot read model {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)?
            }
            (None, None) => {
                return Err(SdsmError::Config("manifest has neither model nor model_path".into()))
            }
        };
        model.validate()?;
        Ok(model)
    }
}

/// Manifest for the local-time subcommand: a run plus the evaluation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTimeManifest {
    pub run: RunManifest,
    /// Evaluation points (one coordinate per entry for d = 1).
    pub xs: Vec<Vec<f64>>,
    pub eps_list: Vec<f64>,
    pub lambda: f64,
}

impl LocalTimeManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SdsmError::Config(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let mut manifest: LocalTimeManifest = serde_json::from_str(&text)?;
        resolve_relative(&mut manifest.run.model_path, path);
        Ok(manifest)
    }
}
