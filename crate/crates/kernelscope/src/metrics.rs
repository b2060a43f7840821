//! Performance measures over fresh evaluation data: weighted L2 kernel
//! errors against the dynamics-induced feature measure, and trajectory
//! prediction errors for the original and transfer populations.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::ReducedKernel;
use crate::dynamics::{generate_dataset, simulate, InteractionKernel, SystemSpec};
use crate::error::{Error, Result};
use crate::features::{feature_dim, feature_map_into};
use crate::mpls::ReductionMap;
use crate::regression::KernelModel;
use crate::rng::stream_rng;

/// Default number of fresh trajectories discretizing the feature measure.
pub const DEFAULT_M_RHO: usize = 2000;

/// Default number of trapezoid nodes for the trajectory-error time integral.
pub const DEFAULT_L_EVAL: usize = 100;

/// Feature samples with pair-distance weights, drawn from fresh trajectories
/// at the observation times.
#[derive(Debug, Clone)]
pub struct RhoSamples {
    pub d: usize,
    pub dim: usize,
    pub ys: Vec<f64>,
    /// `W(y) = ||x_i - x_{i'}||` per sample.
    pub weights: Vec<f64>,
}

impl RhoSamples {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn y(&self, q: usize) -> &[f64] {
        &self.ys[q * self.dim..(q + 1) * self.dim]
    }
}

/// Empirically discretizes the feature measure induced by the dynamics:
/// `m_rho` fresh trajectories, every observation time, both ordered pairs of
/// every distinct-agent pair. The time integral is the uniform average over
/// the observation times.
pub fn sample_rho_t(spec: &SystemSpec, m_rho: usize) -> Result<RhoSamples> {
    let data = generate_dataset(spec, m_rho)?;
    let d = data.d;
    let dim = feature_dim(d);
    let mut ys = Vec::new();
    let mut weights = Vec::new();
    let mut y = vec![0.0; dim];
    for m in 0..data.m {
        for l in 0..data.l_times {
            for i in 0..data.n_agents {
                for ip in 0..data.n_agents {
                    if i == ip {
                        continue;
                    }
                    let xi = data.agent_state(m, l, i);
                    let xip = data.agent_state(m, l, ip);
                    let mut dist2 = 0.0;
                    for k in 0..d {
                        let diff = xip[k] - xi[k];
                        dist2 += diff * diff;
                    }
                    feature_map_into(xi, xip, &mut y);
                    ys.extend_from_slice(&y);
                    weights.push(dist2.sqrt());
                }
            }
        }
    }
    Ok(RhoSamples { d, dim, ys, weights })
}

const RHO_CHUNK: usize = 4096;

/// Weighted root-mean-square distance between two kernel evaluations over
/// the sampled feature measure.
pub fn weighted_rms_distance<F, G>(rho: &RhoSamples, f: F, g: G) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    if rho.is_empty() {
        return 0.0;
    }
    let n_chunks = rho.len().div_ceil(RHO_CHUNK);
    let sums: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * RHO_CHUNK;
            let end = ((c + 1) * RHO_CHUNK).min(rho.len());
            let mut acc = 0.0;
            for q in start..end {
                let y = rho.y(q);
                let diff = f(y) - g(y);
                let w = rho.weights[q];
                acc += diff * diff * w * w;
            }
            acc
        })
        .collect();
    (sums.iter().sum::<f64>() / rho.len() as f64).sqrt()
}

/// Weighted L2 error of the fitted model against the true pair `(B, phi)`,
/// absolute and relative.
pub fn err_phi(
    true_b: &ReductionMap,
    true_phi: &dyn ReducedKernel,
    est: &KernelModel,
    rho: &RhoSamples,
) -> Result<(f64, f64)> {
    if rho.is_empty() {
        return Err(Error::Usage("empty evaluation measure".into()));
    }
    if rho.weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Usage("evaluation measure has no nonzero weights".into()));
    }
    let dp = true_b.dprime();
    let truth = |y: &[f64]| {
        let mut proj = [0.0f64; 8];
        true_b.project(y, &mut proj[..dp]);
        true_phi.eval(&proj[..dp])
    };
    let absolute = weighted_rms_distance(rho, &truth, |y: &[f64]| est.eval_feature(y));
    let denom = weighted_rms_distance(rho, &truth, |_: &[f64]| 0.0);
    if denom == 0.0 {
        return Err(Error::Numeric(
            "true kernel vanishes on the evaluation measure; relative error undefined".into(),
        ));
    }
    Ok((absolute, absolute / denom))
}

/// Trajectory-error summary over a set of initial conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajError {
    pub rel_mean: f64,
    /// Standard deviation over initial conditions (absent for a single one).
    pub rel_std: Option<f64>,
    pub per_ic: Vec<f64>,
    /// Initial conditions dropped because the estimated dynamics diverged.
    pub excluded: usize,
}

/// Substep count preserving (or refining) the training step size when
/// re-gridding from `l_train` to `l_eval` observation nodes.
pub fn eval_substeps(train_substeps: usize, l_train: usize, l_eval: usize) -> usize {
    (train_substeps * (l_train - 1)).div_ceil(l_eval - 1)
}

const TRAJ_CHUNK: usize = 4;

/// Compares the true system against the system driven by the estimated
/// kernel over fresh initial conditions; both sides use the same integrator
/// and step size. Returns the mean over initial conditions of the per-IC
/// relative L2 trajectory error on `l_eval` trapezoid nodes.
pub fn err_traj(
    true_spec: &SystemSpec,
    est_kernel: Arc<dyn InteractionKernel>,
    m_eval: usize,
    l_eval: usize,
) -> Result<TrajError> {
    if m_eval == 0 {
        return Err(Error::Usage("need at least one evaluation initial condition".into()));
    }
    let ics: Vec<Vec<f64>> = (0..m_eval)
        .map(|m| {
            let mut rng = stream_rng(true_spec.rng_seed, m as u64);
            let mut x0 = Vec::with_capacity(true_spec.state_len());
            for _ in 0..true_spec.n_agents {
                for k in 0..true_spec.d {
                    x0.push(if true_spec.init_box.lo[k] == true_spec.init_box.hi[k] {
                        true_spec.init_box.lo[k]
                    } else {
                        use rand::Rng;
                        rng.random_range(true_spec.init_box.lo[k]..true_spec.init_box.hi[k])
                    });
                }
            }
            x0
        })
        .collect();
    err_traj_for_ics(true_spec, est_kernel, &ics, l_eval)
}

/// [`err_traj`] over caller-provided initial conditions.
pub fn err_traj_for_ics(
    true_spec: &SystemSpec,
    est_kernel: Arc<dyn InteractionKernel>,
    ics: &[Vec<f64>],
    l_eval: usize,
) -> Result<TrajError> {
    if l_eval < 2 {
        return Err(Error::Usage("need at least two evaluation nodes".into()));
    }
    let mut eval_spec = true_spec.clone();
    eval_spec.l_times = l_eval;
    eval_spec.substeps = eval_substeps(true_spec.substeps, true_spec.l_times, l_eval);
    let mut est_spec = eval_spec.clone();
    est_spec.kernel = est_kernel;

    let n_chunks = ics.len().div_ceil(TRAJ_CHUNK);
    let results: Vec<Result<Vec<Option<f64>>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * TRAJ_CHUNK;
            let end = ((c + 1) * TRAJ_CHUNK).min(ics.len());
            let mut out = Vec::with_capacity(end - start);
            for x0 in &ics[start..end] {
                let (truth, _) = simulate(&eval_spec, x0)?;
                let est = match simulate(&est_spec, x0) {
                    Ok((s, _)) => s,
                    Err(Error::Divergence { .. }) => {
                        out.push(None);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                out.push(Some(relative_l2_gap(&eval_spec, &truth, &est, l_eval)?));
            }
            Ok(out)
        })
        .collect();

    let mut per_ic = Vec::with_capacity(ics.len());
    let mut excluded = 0usize;
    for chunk in results {
        for item in chunk? {
            match item {
                Some(v) => per_ic.push(v),
                None => excluded += 1,
            }
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} initial conditions excluded: estimated dynamics diverged");
    }
    if per_ic.is_empty() {
        return Err(Error::Numeric("all evaluation trajectories diverged".into()));
    }
    let mean = per_ic.iter().sum::<f64>() / per_ic.len() as f64;
    let std = if per_ic.len() >= 2 {
        let var = per_ic.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (per_ic.len() - 1) as f64;
        Some(var.sqrt())
    } else {
        None
    };
    Ok(TrajError { rel_mean: mean, rel_std: std, per_ic, excluded })
}

/// sqrt of the trapezoid-rule ratio `sum_i int ||x - xhat||^2 / sum_i int ||x||^2`.
fn relative_l2_gap(
    spec: &SystemSpec,
    truth: &[f64],
    est: &[f64],
    l_eval: usize,
) -> Result<f64> {
    let f = spec.state_len();
    let mut num = 0.0;
    let mut den = 0.0;
    for l in 0..l_eval {
        let wt = if l == 0 || l == l_eval - 1 { 0.5 } else { 1.0 };
        let a = &truth[l * f..(l + 1) * f];
        let b = &est[l * f..(l + 1) * f];
        let mut gap = 0.0;
        let mut mag = 0.0;
        for k in 0..f {
            let diff = a[k] - b[k];
            gap += diff * diff;
            mag += a[k] * a[k];
        }
        num += wt * gap;
        den += wt * mag;
    }
    if den == 0.0 {
        return Err(Error::Numeric("true trajectory identically zero; relative error undefined".into()));
    }
    Ok((num / den).sqrt())
}

/// Scalar metrics of one learning trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial: usize,
    pub err_b: Option<f64>,
    pub err_b_frobenius: Option<f64>,
    pub err_phi_abs: Option<f64>,
    pub err_phi_rel: Option<f64>,
    pub err_phi_abs_oracle: Option<f64>,
    pub err_phi_rel_oracle: Option<f64>,
    pub err_traj_rel_mean: Option<f64>,
    pub err_traj_rel_mean_transfer: Option<f64>,
    pub traj_excluded: usize,
    pub traj_excluded_transfer: usize,
    pub reduction_provenance: Option<String>,
}

impl TrialMetrics {
    pub fn empty(trial: usize) -> Self {
        Self {
            trial,
            err_b: None,
            err_b_frobenius: None,
            err_phi_abs: None,
            err_phi_rel: None,
            err_phi_abs_oracle: None,
            err_phi_rel_oracle: None,
            err_traj_rel_mean: None,
            err_traj_rel_mean_transfer: None,
            traj_excluded: 0,
            traj_excluded_transfer: 0,
            reduction_provenance: None,
        }
    }
}

/// Mean and standard deviation of one metric over trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Absent when fewer than two trials contributed.
    pub std: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n >= 2 {
        Some((values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt())
    } else {
        None
    };
    Some(Stat { mean, std, n })
}

/// Aggregated metric summary across trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub err_b: Option<Stat>,
    pub err_b_frobenius: Option<Stat>,
    pub err_phi_abs: Option<Stat>,
    pub err_phi_rel: Option<Stat>,
    pub err_phi_abs_oracle: Option<Stat>,
    pub err_phi_rel_oracle: Option<Stat>,
    pub err_traj_rel_mean: Option<Stat>,
    pub err_traj_rel_mean_transfer: Option<Stat>,
}

/// Full evaluation record: per-trial metrics plus the aggregate summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    pub system: String,
    pub trials_requested: usize,
    pub seed: u64,
    pub trials: Vec<TrialMetrics>,
    pub failures: Vec<String>,
    pub summary: ReportSummary,
}

impl ErrorReport {
    pub fn from_trials(
        system: String,
        trials_requested: usize,
        seed: u64,
        trials: Vec<TrialMetrics>,
        failures: Vec<String>,
    ) -> Self {
        let collect = |f: &dyn Fn(&TrialMetrics) -> Option<f64>| -> Vec<f64> {
            trials.iter().filter_map(f).collect()
        };
        let summary = ReportSummary {
            err_b: aggregate(&collect(&|t| t.err_b)),
            err_b_frobenius: aggregate(&collect(&|t| t.err_b_frobenius)),
            err_phi_abs: aggregate(&collect(&|t| t.err_phi_abs)),
            err_phi_rel: aggregate(&collect(&|t| t.err_phi_rel)),
            err_phi_abs_oracle: aggregate(&collect(&|t| t.err_phi_abs_oracle)),
            err_phi_rel_oracle: aggregate(&collect(&|t| t.err_phi_rel_oracle)),
            err_traj_rel_mean: aggregate(&collect(&|t| t.err_traj_rel_mean)),
            err_traj_rel_mean_transfer: aggregate(&collect(&|t| t.err_traj_rel_mean_transfer)),
        };
        Self { system, trials_requested, seed, trials, failures, summary }
    }

    /// Structured-text table in the benchmark layout, one row per measure.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{} Errors\n", self.system));
        out.push_str(&format!(
            "trials: {}/{}   seed: {}\n\n",
            self.trials.len(),
            self.trials_requested,
            self.seed
        ));
        let rows: [(&str, &Option<Stat>); 5] = [
            ("Err_B", &self.summary.err_b),
            ("Err_phi^rel", &self.summary.err_phi_rel),
            ("Err_phi^rel (Oracle)", &self.summary.err_phi_rel_oracle),
            ("Err_traj,mean^rel", &self.summary.err_traj_rel_mean),
            ("Err_traj,mean^rel (Transfer)", &self.summary.err_traj_rel_mean_transfer),
        ];
        for (label, stat) in rows {
            let value = match stat {
                Some(s) => {
                    let body = match s.std {
                        Some(std) => format!("{:.3e} ± {:.3e}", s.mean, std),
                        None => format!("{:.3e}", s.mean),
                    };
                    if s.n < self.trials.len() {
                        format!("{body} [incomplete: {}/{} trials]", s.n, self.trials.len())
                    } else {
                        body
                    }
                }
                None => "n/a".to_string(),
            };
            out.push_str(&format!("{label:<29} {value}\n"));
        }
        out
    }
}
