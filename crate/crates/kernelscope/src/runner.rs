//! Pipeline orchestration: configuration, the generate/learn/evaluate stages,
//! and multi-trial benchmark reproduction with aggregated reports and
//! columnar plot data.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{BenchmarkSpec, SystemKind};
use crate::dynamics::{generate_dataset, simulate, SystemSpec, TrajectorySet, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};
use crate::features::{extract_regression_samples, RegressionSamples};
use crate::io;
use crate::metrics::{
    err_phi, err_traj, eval_substeps, sample_rho_t, ErrorReport, RhoSamples, TrialMetrics,
    DEFAULT_L_EVAL, DEFAULT_M_RHO,
};
use crate::mpls::{assemble_reduction, err_b, err_b_frobenius, mpls, MplsConfig, ReductionMap};
use crate::regression::{
    estimate_support, fit_kernel, optimal_basis_count, per_dim_count, BasisFamily,
    HypothesisSpace, KernelModel,
};
use crate::rng::{
    derive_seed, TAG_EVAL_N2, TAG_EVAL_TRANSFER, TAG_RHO, TAG_SPLIT, TAG_TRAIN,
    TAG_TRANSFER_DATA, TAG_TRIAL,
};

/// Spline family selection; `Auto` picks piecewise constants for the
/// discontinuous opinion-dynamics kernel and degree-1 clamped B-splines for
/// the continuous power-law kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisChoice {
    #[default]
    Auto,
    Piecewise,
    Bspline,
}

impl std::str::FromStr for BasisChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(BasisChoice::Auto),
            "piecewise" => Ok(BasisChoice::Piecewise),
            "bspline" => Ok(BasisChoice::Bspline),
            other => Err(Error::Config(format!(
                "unknown basis '{other}' (expected auto, piecewise, or bspline)"
            ))),
        }
    }
}

/// Full pipeline configuration. Defaults reproduce the benchmark tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub system: SystemKind,
    /// Training trajectories (two-agent system).
    pub m: usize,
    /// Initial conditions for the transfer population.
    pub m_transfer: usize,
    /// Initial conditions for two-agent trajectory evaluation.
    pub m_eval: usize,
    /// Fresh trajectories discretizing the evaluation feature measure.
    pub m_rho: usize,
    pub n_transfer: usize,
    pub l_times: usize,
    pub t_horizon: f64,
    /// Reduced dimension; defaults to the benchmark's known value.
    pub dprime: Option<usize>,
    pub substeps: usize,
    /// Trapezoid nodes of the trajectory-error time integral.
    pub l_eval: usize,
    pub trials: usize,
    pub seed: u64,
    /// Worker threads; 0 keeps the rayon default.
    pub jobs: usize,
    pub basis: BasisChoice,
    pub degree: Option<usize>,
    /// Override of the total basis count formula.
    pub n_override: Option<usize>,
    pub mpls_k: usize,
    pub mpls_lambda: Option<f64>,
    pub split_seed: Option<u64>,
    pub project_centers: bool,
    /// Skip subspace estimation and fit with the true reduction only.
    pub oracle_only: bool,
    /// Preferred direction of the directionally corrected power-law system.
    pub v0: Vec<f64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Pl,
            m: 50_000,
            m_transfer: 500,
            m_eval: 500,
            m_rho: DEFAULT_M_RHO,
            n_transfer: 20,
            l_times: 5,
            t_horizon: 1.0,
            dprime: None,
            substeps: DEFAULT_SUBSTEPS,
            l_eval: DEFAULT_L_EVAL,
            trials: 10,
            seed: 42,
            jobs: 0,
            basis: BasisChoice::Auto,
            degree: None,
            n_override: None,
            mpls_k: 50,
            mpls_lambda: None,
            split_seed: None,
            project_centers: true,
            oracle_only: false,
            v0: vec![1.0, 0.0],
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn for_system(system: SystemKind) -> Self {
        Self { system, ..Default::default() }
    }

    pub fn benchmark(&self) -> Result<BenchmarkSpec> {
        match self.system {
            SystemKind::Plwdc => crate::benchmarks::build_plwdc(self.v0.clone()),
            other => Ok(BenchmarkSpec::by_kind(other)),
        }
    }

    pub fn system_dir(&self) -> PathBuf {
        self.out.join(self.system.slug())
    }

    fn system_spec(&self, bench: &BenchmarkSpec, n_agents: usize, seed: u64) -> SystemSpec {
        let mut spec = bench.system_spec(n_agents, seed, self.substeps);
        spec.l_times = self.l_times;
        spec.t_horizon = self.t_horizon;
        spec
    }

    fn resolve_basis(&self) -> (BasisFamily, usize) {
        let family = match self.basis {
            BasisChoice::Auto => match self.system {
                SystemKind::Od => BasisFamily::PiecewisePolynomial,
                _ => BasisFamily::ClampedBspline,
            },
            BasisChoice::Piecewise => BasisFamily::PiecewisePolynomial,
            BasisChoice::Bspline => BasisFamily::ClampedBspline,
        };
        let degree = self.degree.unwrap_or(match family {
            BasisFamily::PiecewisePolynomial => 0,
            BasisFamily::ClampedBspline => 1,
        });
        (family, degree)
    }
}

/// Per-trial seed family derived from the master seed.
#[derive(Debug, Clone, Copy)]
pub struct TrialSeeds {
    pub train: u64,
    pub transfer_data: u64,
    pub rho: u64,
    pub eval_n2: u64,
    pub eval_transfer: u64,
    pub split: u64,
}

impl TrialSeeds {
    pub fn derive(cfg: &RunConfig, trial: usize) -> Self {
        let trial_seed = derive_seed(cfg.seed, TAG_TRIAL, trial as u64);
        Self {
            train: derive_seed(trial_seed, TAG_TRAIN, 0),
            transfer_data: derive_seed(trial_seed, TAG_TRANSFER_DATA, 0),
            rho: derive_seed(trial_seed, TAG_RHO, 0),
            eval_n2: derive_seed(trial_seed, TAG_EVAL_N2, 0),
            eval_transfer: derive_seed(trial_seed, TAG_EVAL_TRANSFER, 0),
            split: cfg.split_seed.unwrap_or_else(|| derive_seed(trial_seed, TAG_SPLIT, 0)),
        }
    }
}

/// Output of the learning stage.
pub struct LearnOutput {
    /// Estimated reduction map (absent in oracle-only mode).
    pub reduction: Option<ReductionMap>,
    /// Kernel fitted over the estimated reduction.
    pub model: Option<Arc<KernelModel>>,
    /// Kernel fitted over the true reduction.
    pub oracle_model: Arc<KernelModel>,
    pub singular_values: Vec<f64>,
    pub n_total: usize,
    pub basis_per_dim: Vec<usize>,
}

/// Learning stage: extract regression samples, estimate the reduction map,
/// then fit the reduced kernel over both the estimated and the true map.
pub fn learn_from_dataset(
    cfg: &RunConfig,
    bench: &BenchmarkSpec,
    data: &TrajectorySet,
    split_seed: u64,
) -> Result<LearnOutput> {
    let samples = extract_regression_samples(data)?;
    let dprime = cfg.dprime.unwrap_or(bench.dprime);
    let (family, degree) = cfg.resolve_basis();
    let n_total = cfg.n_override.unwrap_or_else(|| {
        optimal_basis_count(data.l_times, data.m, dprime)
    });
    let per_dim = vec![per_dim_count(n_total, dprime); dprime];

    let mut reduction = None;
    let mut model = None;
    let mut singular_values = Vec::new();
    if !cfg.oracle_only {
        let mpls_cfg = MplsConfig {
            k: cfg.mpls_k,
            lambda: cfg.mpls_lambda,
            split_seed,
            project_centers: cfg.project_centers,
            ..Default::default()
        };
        let output = mpls(&samples, dprime, &mpls_cfg)?;
        singular_values = output.singular_values.iter().copied().collect();
        let est = assemble_reduction(&samples, &output, dprime)?;
        let support = estimate_support(&samples, &est)?;
        let space = HypothesisSpace::uniform(family, degree, support, per_dim.clone())?;
        model = Some(Arc::new(fit_kernel(data, &est, space)?));
        reduction = Some(est);
    }

    let oracle_support = estimate_support(&samples, &bench.true_b)?;
    let oracle_space = HypothesisSpace::uniform(family, degree, oracle_support, per_dim.clone())?;
    let oracle_model = Arc::new(fit_kernel(data, &bench.true_b, oracle_space)?);

    Ok(LearnOutput {
        reduction,
        model,
        oracle_model,
        singular_values,
        n_total,
        basis_per_dim: per_dim,
    })
}

/// Everything produced by one trial.
pub struct TrialArtifacts {
    pub metrics: TrialMetrics,
    pub learn: LearnOutput,
    pub rho: RhoSamples,
}

/// One full generate -> learn -> evaluate trial, entirely in memory.
pub fn run_trial(
    cfg: &RunConfig,
    bench: &BenchmarkSpec,
    trial: usize,
    plot_dir: Option<&Path>,
) -> Result<TrialArtifacts> {
    let seeds = TrialSeeds::derive(cfg, trial);
    let train_spec = cfg.system_spec(bench, bench.common.n_agents, seeds.train);
    let data = generate_dataset(&train_spec, cfg.m)?;
    let learn = learn_from_dataset(cfg, bench, &data, seeds.split)?;
    drop(data);

    let rho_spec = cfg.system_spec(bench, bench.common.n_agents, seeds.rho);
    let rho = sample_rho_t(&rho_spec, cfg.m_rho)?;

    let mut metrics = TrialMetrics::empty(trial);
    metrics.reduction_provenance =
        learn.reduction.as_ref().map(|r| r.provenance.as_str().to_string());

    if let Some(reduction) = &learn.reduction {
        metrics.err_b = Some(err_b(&bench.true_b, reduction)?);
        metrics.err_b_frobenius = Some(err_b_frobenius(&bench.true_b, reduction)?);
    }
    if let Some(model) = &learn.model {
        let (abs, rel) = err_phi(&bench.true_b, bench.true_phi.as_ref(), model, &rho)?;
        metrics.err_phi_abs = Some(abs);
        metrics.err_phi_rel = Some(rel);
    }
    {
        let (abs, rel) = err_phi(&bench.true_b, bench.true_phi.as_ref(), &learn.oracle_model, &rho)?;
        metrics.err_phi_abs_oracle = Some(abs);
        metrics.err_phi_rel_oracle = Some(rel);
    }

    let eval_model = learn.model.as_ref().unwrap_or(&learn.oracle_model);
    let n2_spec = cfg.system_spec(bench, bench.common.n_agents, seeds.eval_n2);
    let n2 = err_traj(&n2_spec, Arc::new(eval_model.as_kernel()), cfg.m_eval, cfg.l_eval)?;
    metrics.err_traj_rel_mean = Some(n2.rel_mean);
    metrics.traj_excluded = n2.excluded;

    let transfer_spec = cfg.system_spec(bench, cfg.n_transfer, seeds.eval_transfer);
    let transfer =
        err_traj(&transfer_spec, Arc::new(eval_model.as_kernel()), cfg.m_transfer, cfg.l_eval)?;
    metrics.err_traj_rel_mean_transfer = Some(transfer.rel_mean);
    metrics.traj_excluded_transfer = transfer.excluded;

    let artifacts = TrialArtifacts { metrics, learn, rho };
    if let Some(dir) = plot_dir {
        emit_plot_data(cfg, bench, &artifacts, &seeds, dir)?;
    }
    Ok(artifacts)
}

/// Runs the configured number of independent trials and writes the final
/// table, the machine-readable report, and plot data from the first trial.
pub fn reproduce(cfg: &RunConfig) -> Result<ErrorReport> {
    let bench = cfg.benchmark()?;
    let dir = cfg.system_dir();
    let plot_dir = dir.join("plots");
    let results: Vec<std::result::Result<TrialMetrics, String>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let plots = if trial == 0 { Some(plot_dir.as_path()) } else { None };
            match run_trial(cfg, &bench, trial, plots) {
                Ok(artifacts) => Ok(artifacts.metrics),
                Err(e) => Err(format!("trial {trial}: {e}")),
            }
        })
        .collect();

    let mut trials = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(m) => trials.push(m),
            Err(msg) => {
                log::error!("{msg}");
                failures.push(msg);
            }
        }
    }
    let report = ErrorReport::from_trials(
        bench.kind.label().to_string(),
        cfg.trials,
        cfg.seed,
        trials,
        failures,
    );
    write_report(&dir, &report)?;
    Ok(report)
}

pub fn write_report(dir: &Path, report: &ErrorReport) -> Result<()> {
    io::write_text_atomic(&dir.join("table.txt"), &report.format_table())?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report encode: {e}")))?;
    io::write_text_atomic(&dir.join("report.json"), &(json + "\n"))?;
    Ok(())
}

/// Writes the training and transfer trajectory sets; returns `(path, sha256)`
/// per file.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<(PathBuf, String)>> {
    let bench = cfg.benchmark()?;
    let seeds = TrialSeeds::derive(cfg, 0);
    let dir = cfg.system_dir();
    let mut outputs = Vec::new();

    let train_spec = cfg.system_spec(&bench, bench.common.n_agents, seeds.train);
    let train = generate_dataset(&train_spec, cfg.m)?;
    let train_path = dir.join("train.traj");
    io::write_trajectory_set(&train_path, &train)?;
    outputs.push((train_path.clone(), io::sha256_file(&train_path)?));
    drop(train);

    let transfer_spec = cfg.system_spec(&bench, cfg.n_transfer, seeds.transfer_data);
    let transfer = generate_dataset(&transfer_spec, cfg.m_transfer)?;
    let transfer_path = dir.join("transfer.traj");
    io::write_trajectory_set(&transfer_path, &transfer)?;
    outputs.push((transfer_path.clone(), io::sha256_file(&transfer_path)?));
    Ok(outputs)
}

/// Learning stage on a persisted dataset; writes the reduction map, both
/// kernel models, and a diagnostics JSON. Returns the written paths.
pub fn cmd_learn(cfg: &RunConfig, data_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    let bench = cfg.benchmark()?;
    let seeds = TrialSeeds::derive(cfg, 0);
    let dir = cfg.system_dir();
    let default_path = dir.join("train.traj");
    let data = io::read_trajectory_set(data_path.unwrap_or(&default_path))?;
    let learn = learn_from_dataset(cfg, &bench, &data, seeds.split)
        .map_err(|e| Error::Usage(format!("learning stage failed: {e}")))?;

    let mut written = Vec::new();
    if let Some(reduction) = &learn.reduction {
        let p = dir.join("reduction.rmap");
        io::write_reduction_map(&p, reduction)?;
        written.push(p);
    }
    if let Some(model) = &learn.model {
        let p = dir.join("model_learned.kmod");
        io::write_kernel_model(&p, model)?;
        written.push(p);
    }
    let p = dir.join("model_oracle.kmod");
    io::write_kernel_model(&p, &learn.oracle_model)?;
    written.push(p);

    #[derive(Serialize)]
    struct LearnDiagnostics<'a> {
        system: &'a str,
        dprime: usize,
        n_total: usize,
        basis_per_dim: &'a [usize],
        singular_values: &'a [f64],
        provenance: Option<&'a str>,
    }
    let diag = LearnDiagnostics {
        system: bench.kind.slug(),
        dprime: cfg.dprime.unwrap_or(bench.dprime),
        n_total: learn.n_total,
        basis_per_dim: &learn.basis_per_dim,
        singular_values: &learn.singular_values,
        provenance: learn.reduction.as_ref().map(|r| r.provenance.as_str()),
    };
    let p = dir.join("learn.json");
    io::write_text_atomic(
        &p,
        &(serde_json::to_string_pretty(&diag)
            .map_err(|e| Error::Format(format!("diagnostics encode: {e}")))?
            + "\n"),
    )?;
    written.push(p);
    Ok(written)
}

/// Evaluation stage on persisted models: computes all metrics on fresh data
/// and writes the report plus plot data.
pub fn cmd_evaluate(cfg: &RunConfig, models_dir: Option<&Path>) -> Result<ErrorReport> {
    let bench = cfg.benchmark()?;
    let seeds = TrialSeeds::derive(cfg, 0);
    let dir = cfg.system_dir();
    let mdir = models_dir.unwrap_or(&dir);

    let oracle_path = mdir.join("model_oracle.kmod");
    if !oracle_path.exists() {
        return Err(Error::Usage(format!("missing model file {}", oracle_path.display())));
    }
    let oracle_model = Arc::new(io::read_kernel_model(&oracle_path)?);
    let (reduction, model) = if cfg.oracle_only {
        (None, None)
    } else {
        let model_path = mdir.join("model_learned.kmod");
        if !model_path.exists() {
            return Err(Error::Usage(format!("missing model file {}", model_path.display())));
        }
        let model = Arc::new(io::read_kernel_model(&model_path)?);
        (Some(model.reduction.clone()), Some(model))
    };

    let rho_spec = cfg.system_spec(&bench, bench.common.n_agents, seeds.rho);
    let rho = sample_rho_t(&rho_spec, cfg.m_rho)?;

    let mut metrics = TrialMetrics::empty(0);
    metrics.reduction_provenance =
        reduction.as_ref().map(|r| r.provenance.as_str().to_string());
    if let Some(reduction) = &reduction {
        metrics.err_b = Some(err_b(&bench.true_b, reduction)?);
        metrics.err_b_frobenius = Some(err_b_frobenius(&bench.true_b, reduction)?);
    }
    if let Some(model) = &model {
        let (abs, rel) = err_phi(&bench.true_b, bench.true_phi.as_ref(), model, &rho)?;
        metrics.err_phi_abs = Some(abs);
        metrics.err_phi_rel = Some(rel);
    }
    let (abs, rel) = err_phi(&bench.true_b, bench.true_phi.as_ref(), &oracle_model, &rho)?;
    metrics.err_phi_abs_oracle = Some(abs);
    metrics.err_phi_rel_oracle = Some(rel);

    let eval_model = model.as_ref().unwrap_or(&oracle_model);
    let n2_spec = cfg.system_spec(&bench, bench.common.n_agents, seeds.eval_n2);
    let n2 = err_traj(&n2_spec, Arc::new(eval_model.as_kernel()), cfg.m_eval, cfg.l_eval)?;
    metrics.err_traj_rel_mean = Some(n2.rel_mean);
    metrics.traj_excluded = n2.excluded;
    let transfer_spec = cfg.system_spec(&bench, cfg.n_transfer, seeds.eval_transfer);
    let transfer =
        err_traj(&transfer_spec, Arc::new(eval_model.as_kernel()), cfg.m_transfer, cfg.l_eval)?;
    metrics.err_traj_rel_mean_transfer = Some(transfer.rel_mean);
    metrics.traj_excluded_transfer = transfer.excluded;

    let learn = LearnOutput {
        reduction,
        model,
        oracle_model,
        singular_values: Vec::new(),
        n_total: 0,
        basis_per_dim: Vec::new(),
    };
    let artifacts = TrialArtifacts { metrics, learn, rho };
    emit_plot_data(cfg, &bench, &artifacts, &seeds, &dir.join("plots"))?;

    let report = ErrorReport::from_trials(
        bench.kind.label().to_string(),
        1,
        cfg.seed,
        vec![artifacts.metrics.clone()],
        Vec::new(),
    );
    io::write_text_atomic(&dir.join("report.txt"), &report.format_table())?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report encode: {e}")))?;
    io::write_text_atomic(&dir.join("report.json"), &(json + "\n"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// plot data emission

const SCATTER_LIMIT: usize = 5000;
const GRID_1D: usize = 512;
const GRID_2D: usize = 128;
const HIST_BINS: usize = 64;
const PLOT_TRAJECTORIES: usize = 3;

fn fmt_cols(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.8e}")).collect::<Vec<_>>().join("\t")
}

/// Writes the columnar plot files: projection scatter, kernel grids,
/// projection histograms, and paired true/estimated trajectories.
fn emit_plot_data(
    cfg: &RunConfig,
    bench: &BenchmarkSpec,
    artifacts: &TrialArtifacts,
    seeds: &TrialSeeds,
    dir: &Path,
) -> Result<()> {
    let rho = &artifacts.rho;
    let dp = bench.dprime;
    let learned = artifacts.learn.model.as_ref();

    // scatter of true vs estimated projections
    {
        let est_reduction = artifacts
            .learn
            .reduction
            .as_ref()
            .unwrap_or(&bench.true_b);
        let mut rows = String::new();
        let header: Vec<String> = (0..dp)
            .map(|k| format!("by_{k}"))
            .chain((0..dp).map(|k| format!("byhat_{k}")))
            .collect();
        rows.push_str(&header.join("\t"));
        rows.push('\n');
        let mut t = vec![0.0; dp];
        let mut e = vec![0.0; dp];
        for q in 0..rho.len().min(SCATTER_LIMIT) {
            bench.true_b.project(rho.y(q), &mut t);
            est_reduction.project(rho.y(q), &mut e);
            let all: Vec<f64> = t.iter().chain(e.iter()).copied().collect();
            rows.push_str(&fmt_cols(&all));
            rows.push('\n');
        }
        io::write_text_atomic(&dir.join("scatter_projection.tsv"), &rows)?;
    }

    // kernel values on uniform grids over each model's support
    let grid_file = |model: &KernelModel, eval_true: bool, name: &str| -> Result<()> {
        let support = &model.space.support;
        let mut rows = String::new();
        let header: Vec<String> = (0..dp)
            .map(|k| format!("xi_{k}"))
            .chain(std::iter::once("phi".to_string()))
            .collect();
        rows.push_str(&header.join("\t"));
        rows.push('\n');
        if dp == 1 {
            for i in 0..GRID_1D {
                let t = support[0][0]
                    + (support[0][1] - support[0][0]) * i as f64 / (GRID_1D - 1) as f64;
                let v = if eval_true { bench.true_phi.eval(&[t]) } else { model.eval_reduced(&[t]) };
                rows.push_str(&fmt_cols(&[t, v]));
                rows.push('\n');
            }
        } else {
            for i in 0..GRID_2D {
                let t0 = support[0][0]
                    + (support[0][1] - support[0][0]) * i as f64 / (GRID_2D - 1) as f64;
                for j in 0..GRID_2D {
                    let t1 = support[1][0]
                        + (support[1][1] - support[1][0]) * j as f64 / (GRID_2D - 1) as f64;
                    let v = if eval_true {
                        bench.true_phi.eval(&[t0, t1])
                    } else {
                        model.eval_reduced(&[t0, t1])
                    };
                    rows.push_str(&fmt_cols(&[t0, t1, v]));
                    rows.push('\n');
                }
            }
        }
        io::write_text_atomic(&dir.join(name), &rows)
    };
    grid_file(&artifacts.learn.oracle_model, true, "kernel_true.tsv")?;
    grid_file(&artifacts.learn.oracle_model, false, "kernel_oracle.tsv")?;
    if let Some(model) = learned {
        grid_file(model, false, "kernel_learned.tsv")?;
    }

    // per-dimension histograms of the true and estimated projections
    {
        let est_reduction = artifacts.learn.reduction.as_ref().unwrap_or(&bench.true_b);
        let mut t = vec![0.0; dp];
        let mut e = vec![0.0; dp];
        let mut true_proj = vec![Vec::with_capacity(rho.len()); dp];
        let mut est_proj = vec![Vec::with_capacity(rho.len()); dp];
        for q in 0..rho.len() {
            bench.true_b.project(rho.y(q), &mut t);
            est_reduction.project(rho.y(q), &mut e);
            for k in 0..dp {
                true_proj[k].push(t[k]);
                est_proj[k].push(e[k]);
            }
        }
        let hist = |vals: &[f64]| -> (Vec<f64>, Vec<usize>) {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = if hi > lo { hi - lo } else { 1.0 };
            let mut counts = vec![0usize; HIST_BINS];
            for &v in vals {
                let b = (((v - lo) / width * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                counts[b] += 1;
            }
            let centers =
                (0..HIST_BINS).map(|b| lo + (b as f64 + 0.5) * width / HIST_BINS as f64).collect();
            (centers, counts)
        };
        for k in 0..dp {
            let (tc, tn) = hist(&true_proj[k]);
            let (ec, en) = hist(&est_proj[k]);
            let mut rows = String::from("center_true\tcount_true\tcenter_est\tcount_est\n");
            for b in 0..HIST_BINS {
                rows.push_str(&format!(
                    "{:.8e}\t{}\t{:.8e}\t{}\n",
                    tc[b], tn[b], ec[b], en[b]
                ));
            }
            io::write_text_atomic(&dir.join(format!("projection_hist_{k}.tsv")), &rows)?;
        }
    }

    // paired true/estimated trajectories for a few fresh initial conditions
    let eval_model = learned.unwrap_or(&artifacts.learn.oracle_model);
    let traj_file = |n_agents: usize, seed: u64, name: &str| -> Result<()> {
        let mut spec = cfg.system_spec(bench, n_agents, seed);
        spec.substeps = eval_substeps(cfg.substeps, cfg.l_times, cfg.l_eval);
        spec.l_times = cfg.l_eval;
        let mut est_spec = spec.clone();
        est_spec.kernel = Arc::new(eval_model.as_kernel());
        let ics = crate::dynamics::sample_initial_conditions(&spec, PLOT_TRAJECTORIES)?;
        let d = spec.d;
        let mut rows = String::from("ic\tt\tagent");
        for k in 0..d {
            rows.push_str(&format!("\tx_true_{k}"));
        }
        for k in 0..d {
            rows.push_str(&format!("\tx_est_{k}"));
        }
        rows.push('\n');
        let times: Vec<f64> =
            (0..cfg.l_eval).map(|l| l as f64 * cfg.t_horizon / (cfg.l_eval - 1) as f64).collect();
        for (ic, x0) in ics.iter().enumerate() {
            let (truth, _) = simulate(&spec, x0)?;
            let est = match simulate(&est_spec, x0) {
                Ok((s, _)) => s,
                Err(Error::Divergence { .. }) => continue,
                Err(e) => return Err(e),
            };
            for (l, t) in times.iter().enumerate() {
                for agent in 0..n_agents {
                    let off = (l * n_agents + agent) * d;
                    rows.push_str(&format!("{ic}\t{t:.8e}\t{agent}"));
                    for k in 0..d {
                        rows.push_str(&format!("\t{:.8e}", truth[off + k]));
                    }
                    for k in 0..d {
                        rows.push_str(&format!("\t{:.8e}", est[off + k]));
                    }
                    rows.push('\n');
                }
            }
        }
        io::write_text_atomic(&dir.join(name), &rows)
    };
    traj_file(bench.common.n_agents, derive_seed(seeds.eval_n2, TAG_EVAL_N2, 1), "trajectories_n2.tsv")?;
    traj_file(cfg.n_transfer, derive_seed(seeds.eval_transfer, TAG_EVAL_TRANSFER, 1), "trajectories_transfer.tsv")?;
    Ok(())
}

/// Regression samples of a persisted dataset, re-exported for tooling.
pub fn extract_samples_for(data: &TrajectorySet) -> Result<RegressionSamples> {
    extract_regression_samples(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(system: SystemKind, out: &Path) -> RunConfig {
        RunConfig {
            system,
            m: 400,
            m_transfer: 4,
            m_eval: 6,
            m_rho: 40,
            n_transfer: 5,
            substeps: 20,
            l_eval: 11,
            trials: 2,
            seed: 11,
            out: out.to_path_buf(),
            ..RunConfig::for_system(system)
        }
    }

    #[test]
    fn single_trial_produces_finite_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(SystemKind::Pl, dir.path());
        let bench = cfg.benchmark().unwrap();
        let artifacts = run_trial(&cfg, &bench, 0, None).unwrap();
        let m = &artifacts.metrics;
        assert!(m.err_b.unwrap().is_finite());
        assert!(m.err_phi_rel.unwrap() > 0.0);
        assert!(m.err_phi_rel_oracle.unwrap() > 0.0);
        assert!(m.err_traj_rel_mean.unwrap() >= 0.0);
        assert!(m.err_traj_rel_mean_transfer.unwrap() >= 0.0);
    }

    #[test]
    fn generate_learn_evaluate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(SystemKind::Pl, dir.path());
        let outputs = cmd_generate(&cfg).unwrap();
        assert_eq!(outputs.len(), 2);
        for (path, checksum) in &outputs {
            assert!(path.exists());
            assert_eq!(checksum.len(), 64);
        }
        let written = cmd_learn(&cfg, None).unwrap();
        assert!(written.iter().any(|p| p.ends_with("model_learned.kmod")));
        assert!(written.iter().any(|p| p.ends_with("model_oracle.kmod")));
        let report = cmd_evaluate(&cfg, None).unwrap();
        assert_eq!(report.trials.len(), 1);
        assert!(report.summary.err_phi_rel.is_some());
        assert!(dir.path().join("pl/plots/scatter_projection.tsv").exists());
        assert!(dir.path().join("pl/plots/kernel_true.tsv").exists());
        assert!(dir.path().join("pl/report.txt").exists());
    }

    #[test]
    fn generate_is_deterministic() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let out1 = cmd_generate(&quick_cfg(SystemKind::Pl, dir1.path())).unwrap();
        let out2 = cmd_generate(&quick_cfg(SystemKind::Pl, dir2.path())).unwrap();
        assert_eq!(out1[0].1, out2[0].1);
        assert_eq!(out1[1].1, out2[1].1);
    }

    #[test]
    fn oracle_only_skips_subspace_estimation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(SystemKind::Pl, dir.path());
        cfg.oracle_only = true;
        let bench = cfg.benchmark().unwrap();
        let artifacts = run_trial(&cfg, &bench, 0, None).unwrap();
        assert!(artifacts.learn.reduction.is_none());
        assert!(artifacts.metrics.err_b.is_none());
        assert!(artifacts.metrics.err_phi_rel_oracle.is_some());
    }

    #[test]
    fn reproduce_writes_identical_tables_for_identical_seeds() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let r1 = reproduce(&quick_cfg(SystemKind::Pl, dir1.path())).unwrap();
        let r2 = reproduce(&quick_cfg(SystemKind::Pl, dir2.path())).unwrap();
        assert_eq!(r1.trials.len(), 2);
        assert_eq!(r2.trials.len(), 2);
        let t1 = std::fs::read(dir1.path().join("pl/table.txt")).unwrap();
        let t2 = std::fs::read(dir2.path().join("pl/table.txt")).unwrap();
        assert_eq!(t1, t2);
        let j1 = std::fs::read(dir1.path().join("pl/report.json")).unwrap();
        let j2 = std::fs::read(dir2.path().join("pl/report.json")).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn evaluate_without_models_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(SystemKind::Pl, dir.path());
        match cmd_evaluate(&cfg, None) {
            Err(Error::Usage(msg)) => assert!(msg.contains("missing model")),
            other => panic!("expected missing-model error, got {other:?}"),
        }
    }
}
