//! Command-line driver.
//!
//! Exit status: 0 success, 1 validation-check failure, 2 usage error,
//! 3 configuration error.

use clap::{Parser, Subcommand};
use sdsm::config::{DualManifest, LocalTimeManifest, RunManifest};
use sdsm::dual::{dual_moment, DualFunction, DualMomentConfig};
use sdsm::green::{
    chi_bound_check, grad_q_lambda_eps, norm_report, q_lambda_eps, q_lambda_radial, KernelSpec,
};
use sdsm::localtime::tanaka_estimate;
use sdsm::output;
use sdsm::particles::{run_ensemble, Observable, Track};
use sdsm::rng::RngFactory;
use sdsm::testfn::ObservableSpec;
use sdsm::validate::{all_pass, format_table, run_suite, CheckManifest};
use sdsm::{Result, SdsmError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sdsm", version, about = "Superprocess-with-dependent-spatial-motion simulator and validation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for replicate-level parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides the manifest; relative paths resolve
    /// under $SDSM_OUT_ROOT when set).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master-seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a branching-particle ensemble from a run manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate moments through the dual process.
    Dual {
        #[arg(long)]
        config: PathBuf,
    },
    /// Kernel reports: norms, the chi bound, and grid evaluations.
    Green {
        /// lambda of the resolvent kernel.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Effective diffusion sigma_0^2.
        #[arg(long, default_value_t = 2.0)]
        sigma_sq: f64,
        /// Perturbation eps for the smooth kernel columns.
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// Kernel grid maximum radius; 0 disables the grid export.
        #[arg(long, default_value_t = 5.0)]
        grid_max: f64,
        #[arg(long, default_value_t = 0.1)]
        grid_step: f64,
    },
    /// Local-time / Tanaka decomposition on freshly simulated paths.
    Localtime {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the validation suite from a check manifest.
    Check {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>, manifest_out: Option<&Path>, default: &str) -> PathBuf {
    let dir = cli_out
        .clone()
        .or_else(|| manifest_out.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(default));
    match std::env::var_os("SDSM_OUT_ROOT") {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { config } => {
            let mut manifest = RunManifest::from_path(&config)?;
            if let Some(seed) = cli.seed {
                manifest.seed = seed;
            }
            if let Some(w) = cli.workers {
                manifest.workers = Some(w);
            }
            let (model, observables) = manifest.resolve()?;
            let dir = out_dir(&cli.out, manifest.out_dir.as_deref(), "out/simulate");
            let factory = RngFactory::new(manifest.seed);
            let workers = manifest.workers.unwrap_or_else(default_workers);
            let records = run_ensemble(
                &model,
                &manifest.mu0,
                &manifest.sim,
                &observables,
                &factory,
                manifest.replicates,
                workers,
            )?;
            std::fs::create_dir_all(&dir)?;
            let mut resolved = manifest.resolved_copy()?;
            resolved.workers = Some(workers);
            output::write_json(&dir, "manifest.json", &ManifestWithBuild::new(&resolved))?;
            let file = std::fs::File::create(dir.join("series.csv"))?;
            output::write_series_csv(file, &records)?;
            if manifest.sim.store_snapshots {
                if let Some(first) = records.first() {
                    let file = std::fs::File::create(dir.join("snapshots.bin"))?;
                    output::write_snapshots(file, first)?;
                }
            }
            println!(
                "simulated {} replicates to t = {} ({} observables) -> {}",
                manifest.replicates,
                manifest.sim.t_end,
                observables.len(),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Dual { config } => {
            let mut manifest = DualManifest::from_path(&config)?;
            if let Some(seed) = cli.seed {
                manifest.seed = seed;
            }
            let model = manifest.resolve_model()?;
            let dir = out_dir(&cli.out, manifest.out_dir.as_deref(), "out/dual");
            std::fs::create_dir_all(&dir)?;
            let factory = RngFactory::new(manifest.seed);
            let cfg = DualMomentConfig {
                t: manifest.t,
                reps: manifest.reps,
                dt: manifest.dt,
                noise_mode: Default::default(),
            };
            let file = std::fs::File::create(dir.join("estimates.csv"))?;
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::CRLF)
                .from_writer(file);
            w.write_record(["m", "observable", "estimate", "se", "reps", "rejected"])?;
            for target in &manifest.targets {
                let f = match &target.observable {
                    Some(spec) => DualFunction::Product(
                        Observable::from_spec("f", spec, &model, Track::ValueOnly)?.f,
                    ),
                    None => DualFunction::Constant(1.0),
                };
                let est = dual_moment(&f, target.m, &manifest.mu0, &model, &cfg, &factory)?;
                w.write_record([
                    target.m.to_string(),
                    target.id.clone(),
                    format!("{:?}", est.estimate),
                    format!("{:?}", est.se),
                    est.reps.to_string(),
                    est.rejected.to_string(),
                ])?;
                println!(
                    "m = {}: {} = {:.6} +- {:.6} ({} reps)",
                    target.m, target.id, est.estimate, est.se, est.reps
                );
            }
            w.flush()?;
            output::write_json(&dir, "manifest.json", &ManifestWithBuild::new(&manifest))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Green { lambda, sigma_sq, eps, grid_max, grid_step } => {
            let dir = out_dir(&cli.out, None, "out/green");
            std::fs::create_dir_all(&dir)?;
            // Norm report.
            {
                let rows = norm_report(lambda, sigma_sq)?;
                let file = std::fs::File::create(dir.join("norms.csv"))?;
                let mut w = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::CRLF)
                    .from_writer(file);
                w.write_record(["name", "d", "value", "expected", "stable", "pass"])?;
                for r in &rows {
                    w.write_record([
                        r.name.clone(),
                        r.d.to_string(),
                        format!("{:?}", r.value),
                        r.expected.map_or(String::new(), |e| format!("{e:?}")),
                        r.stable.to_string(),
                        r.pass.to_string(),
                    ])?;
                    println!(
                        "{:<22} d={}  value {:.9e}  pass {}",
                        r.name, r.d, r.value, r.pass
                    );
                }
                w.flush()?;
            }
            // chi_d bound.
            {
                let file = std::fs::File::create(dir.join("chi.csv"))?;
                let mut w = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::CRLF)
                    .from_writer(file);
                w.write_record(["d", "t", "lambda", "chi", "bound", "pass", "diverged"])?;
                for d in 1..=4usize {
                    let rep = chi_bound_check(d, 1.0, lambda)?;
                    w.write_record([
                        d.to_string(),
                        format!("{:?}", rep.t),
                        format!("{:?}", rep.lambda),
                        format!("{:?}", rep.chi),
                        format!("{:?}", rep.bound),
                        rep.pass.to_string(),
                        rep.diverged.to_string(),
                    ])?;
                    println!(
                        "chi_{d}(1) = {:<12.6} bound {:.6}  pass {}",
                        rep.chi, rep.bound, rep.pass
                    );
                }
                w.flush()?;
            }
            // Kernel grid export.
            if grid_max > 0.0 {
                let file = std::fs::File::create(dir.join("kernels.csv"))?;
                let mut w = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::CRLF)
                    .from_writer(file);
                w.write_record(["d", "r", "q_lambda", "q_lambda_eps", "grad_q_lambda_eps"])?;
                for d in 1..=3usize {
                    let spec0 = KernelSpec::new(lambda, 0.0, sigma_sq, d)?;
                    let spec_eps = KernelSpec::new(lambda, eps, sigma_sq, d)?;
                    let steps = (grid_max / grid_step).round() as usize;
                    for i in 0..=steps {
                        let r = i as f64 * grid_step;
                        let q = if r == 0.0 && d >= 2 {
                            f64::INFINITY
                        } else {
                            q_lambda_radial(&spec0, r)?
                        };
                        let mut x = vec![0.0; d];
                        x[0] = r;
                        let qe = q_lambda_eps(&spec_eps, &x)?;
                        let g = grad_q_lambda_eps(&spec_eps, &x)?[0];
                        w.write_record([
                            d.to_string(),
                            format!("{r:?}"),
                            format!("{q:?}"),
                            format!("{qe:?}"),
                            format!("{g:?}"),
                        ])?;
                    }
                }
                w.flush()?;
            }
            println!("kernel reports -> {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Localtime { config } => {
            let mut manifest = LocalTimeManifest::from_path(&config)?;
            if let Some(seed) = cli.seed {
                manifest.run.seed = seed;
            }
            let (model, mut observables) = manifest.run.resolve()?;
            if manifest.run.sim.snapshot_stride != 1 {
                return Err(SdsmError::Config(
                    "local-time runs need snapshot_stride = 1".into(),
                ));
            }
            // Register the Tanaka observables for every (x, eps) pair.
            for (xi, x) in manifest.xs.iter().enumerate() {
                for (ei, &eps) in manifest.eps_list.iter().enumerate() {
                    observables.push(Observable::from_spec(
                        format!("psi_{xi}_{ei}"),
                        &ObservableSpec::ResolventKernelAt {
                            x: x.clone(),
                            lambda: manifest.lambda,
                            eps,
                        },
                        &model,
                        Track::Full,
                    )?);
                    let mut qeps = Observable::from_spec(
                        format!("qeps_{xi}_{ei}"),
                        &ObservableSpec::HeatKernelAt { x: x.clone(), eps },
                        &model,
                        Track::Full,
                    )?;
                    qeps.track = Track::Occupation;
                    observables.push(qeps);
                }
            }
            let dir = out_dir(&cli.out, manifest.run.out_dir.as_deref(), "out/localtime");
            std::fs::create_dir_all(&dir)?;
            let factory = RngFactory::new(manifest.run.seed);
            let workers = cli.workers.or(manifest.run.workers).unwrap_or_else(default_workers);
            let records = run_ensemble(
                &model,
                &manifest.run.mu0,
                &manifest.run.sim,
                &observables,
                &factory,
                manifest.run.replicates,
                workers,
            )?;
            let file = std::fs::File::create(dir.join("localtime.csv"))?;
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::CRLF)
                .from_writer(file);
            w.write_record([
                "replicate",
                "x",
                "eps",
                "lambda",
                "local_time",
                "initial_kernel_mass",
                "terminal_kernel_mass",
                "lambda_integral",
                "common_noise_term",
                "branching_term",
                "individual_term",
                "residual",
            ])?;
            for (rep, record) in records.iter().enumerate() {
                for (xi, x) in manifest.xs.iter().enumerate() {
                    for (ei, &eps) in manifest.eps_list.iter().enumerate() {
                        let est = tanaka_estimate(
                            record,
                            x,
                            eps,
                            manifest.lambda,
                            &format!("psi_{xi}_{ei}"),
                            &format!("qeps_{xi}_{ei}"),
                        )?;
                        w.write_record([
                            rep.to_string(),
                            format!("{:?}", x[0]),
                            format!("{eps:?}"),
                            format!("{:?}", manifest.lambda),
                            format!("{:?}", est.value),
                            format!("{:?}", est.initial_kernel_mass),
                            format!("{:?}", est.terminal_kernel_mass),
                            format!("{:?}", est.lambda_integral),
                            format!("{:?}", est.common_noise_term),
                            format!("{:?}", est.branching_term),
                            format!("{:?}", est.individual_term),
                            format!("{:?}", est.residual()),
                        ])?;
                    }
                }
            }
            w.flush()?;
            output::write_json(&dir, "manifest.json", &ManifestWithBuild::new(&manifest))?;
            println!(
                "local-time table for {} paths x {} points x {} eps -> {}",
                records.len(),
                manifest.xs.len(),
                manifest.eps_list.len(),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { manifest } => {
            let text = std::fs::read_to_string(&manifest).map_err(|e| {
                SdsmError::Config(format!("cannot read manifest {}: {e}", manifest.display()))
            })?;
            let mut check: CheckManifest = serde_json::from_str(&text)?;
            if let Some(seed) = cli.seed {
                check.seed = seed;
            }
            if let Some(w) = cli.workers {
                check.workers = w;
            }
            let dir = out_dir(&cli.out, None, "out/check");
            std::fs::create_dir_all(&dir)?;
            let reports = run_suite(&check);
            print!("{}", format_table(&reports));
            output::write_json(&dir, "report.json", &reports)?;
            output::write_json(&dir, "manifest.json", &ManifestWithBuild::new(&check))?;
            if all_pass(&reports) {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Wrapper adding the build identifier to every written manifest.
#[derive(serde::Serialize)]
struct ManifestWithBuild<'a, T: serde::Serialize> {
    build: String,
    #[serde(flatten)]
    manifest: &'a T,
}

impl<'a, T: serde::Serialize> ManifestWithBuild<'a, T> {
    fn new(manifest: &'a T) -> Self {
        Self { build: sdsm::output::build_id(), manifest }
    }
}
