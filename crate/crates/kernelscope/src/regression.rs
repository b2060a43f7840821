//! Nonparametric estimation of the reduced kernel: finite-dimensional spline
//! spaces over the projected features, fitted by minimizing the trajectory
//! error functional
//! `E(psi) = (1/NLM) sum_{i,l,m} || xdot_i - (1/N) sum_{i'} psi(B y_{i,i'}) (x_{i'} - x_i) ||^2`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{InteractionKernel, TrajectorySet};
use crate::error::{Error, Result};
use crate::features::{feature_dim, feature_map_into, RegressionSamples, PAIR_TOLERANCE};
use crate::linalg::solve_spd;
use crate::mpls::ReductionMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    PiecewisePolynomial,
    ClampedBspline,
}

impl BasisFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            BasisFamily::PiecewisePolynomial => "piecewise_polynomial",
            BasisFamily::ClampedBspline => "clamped_bspline",
        }
    }
}

impl std::str::FromStr for BasisFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piecewise_polynomial" | "piecewise" => Ok(BasisFamily::PiecewisePolynomial),
            "clamped_bspline" | "bspline" => Ok(BasisFamily::ClampedBspline),
            other => Err(Error::Format(format!("unknown basis family '{other}'"))),
        }
    }
}

pub const MAX_DEGREE: usize = 7;
const MAX_DPRIME: usize = 4;

/// Tensor-product spline space on an axis-aligned support box.
///
/// Evaluation outside the box is zero by convention.
#[derive(Debug, Clone)]
pub struct HypothesisSpace {
    pub family: BasisFamily,
    pub degree: usize,
    /// Per-dimension `[lo, hi]`.
    pub support: Vec<[f64; 2]>,
    pub basis_per_dim: Vec<usize>,
    pub cells_per_dim: Vec<usize>,
    pub n_total: usize,
}

impl HypothesisSpace {
    /// Uniform-partition space with (at least) `basis_per_dim[k]` basis
    /// functions along dimension `k`.
    ///
    /// For piecewise polynomials the per-dimension count is rounded up to a
    /// multiple of `degree + 1`.
    pub fn uniform(
        family: BasisFamily,
        degree: usize,
        support: Vec<[f64; 2]>,
        basis_per_dim: Vec<usize>,
    ) -> Result<Self> {
        if support.is_empty() || support.len() != basis_per_dim.len() {
            return Err(Error::Config("support and basis counts must match".into()));
        }
        if support.len() > MAX_DPRIME {
            return Err(Error::Config(format!("at most {MAX_DPRIME} reduced dimensions supported")));
        }
        if degree > MAX_DEGREE {
            return Err(Error::Config(format!("degree {degree} exceeds maximum {MAX_DEGREE}")));
        }
        for s in &support {
            if !(s[1] > s[0]) {
                return Err(Error::Config(format!("empty support interval [{}, {}]", s[0], s[1])));
            }
        }
        let mut counts = Vec::with_capacity(basis_per_dim.len());
        let mut cells = Vec::with_capacity(basis_per_dim.len());
        for &n in &basis_per_dim {
            if n == 0 {
                return Err(Error::Config("basis count must be positive".into()));
            }
            match family {
                BasisFamily::PiecewisePolynomial => {
                    let c = n.div_ceil(degree + 1);
                    let actual = c * (degree + 1);
                    if actual != n {
                        log::info!("rounded per-dimension basis count {n} up to {actual}");
                    }
                    cells.push(c);
                    counts.push(actual);
                }
                BasisFamily::ClampedBspline => {
                    if n <= degree {
                        return Err(Error::Config(format!(
                            "clamped B-spline basis needs more than degree = {degree} functions, got {n}"
                        )));
                    }
                    cells.push(n - degree);
                    counts.push(n);
                }
            }
        }
        let n_total = counts.iter().product();
        Ok(Self { family, degree, support, basis_per_dim: counts, cells_per_dim: cells, n_total })
    }

    pub fn dprime(&self) -> usize {
        self.support.len()
    }

    /// Nonzero basis functions along dimension `dim` at coordinate `t`:
    /// writes their values into `vals` and returns `(first_index, count)`,
    /// or `None` outside the support.
    pub fn eval_dim(&self, dim: usize, t: f64, vals: &mut [f64]) -> Option<(usize, usize)> {
        let [lo, hi] = self.support[dim];
        if !(t >= lo && t <= hi) {
            return None;
        }
        let cells = self.cells_per_dim[dim];
        let h = (hi - lo) / cells as f64;
        let cell = (((t - lo) / h) as usize).min(cells - 1);
        match self.family {
            BasisFamily::PiecewisePolynomial => {
                let u = (t - (lo + cell as f64 * h)) / h;
                let mut p = 1.0;
                for v in vals.iter_mut().take(self.degree + 1) {
                    *v = p;
                    p *= u;
                }
                Some((cell * (self.degree + 1), self.degree + 1))
            }
            BasisFamily::ClampedBspline => {
                let p = self.degree;
                let n = self.basis_per_dim[dim];
                // clamped uniform knot vector
                let knot = |i: usize| -> f64 {
                    if i <= p {
                        lo
                    } else if i >= n {
                        hi
                    } else {
                        lo + (i - p) as f64 * h
                    }
                };
                let span = cell + p; // knot(span) <= t < knot(span + 1)
                let mut left = [0.0f64; MAX_DEGREE + 1];
                let mut right = [0.0f64; MAX_DEGREE + 1];
                vals[0] = 1.0;
                for j in 1..=p {
                    left[j] = t - knot(span + 1 - j);
                    right[j] = knot(span + j) - t;
                    let mut saved = 0.0;
                    for r in 0..j {
                        let tmp = vals[r] / (right[r + 1] + left[j - r]);
                        vals[r] = saved + right[r + 1] * tmp;
                        saved = left[j - r] * tmp;
                    }
                    vals[j] = saved;
                }
                Some((cell, p + 1))
            }
        }
    }

    fn strides(&self) -> [usize; MAX_DPRIME] {
        let dp = self.dprime();
        let mut strides = [1usize; MAX_DPRIME];
        for dim in (0..dp.saturating_sub(1)).rev() {
            strides[dim] = strides[dim + 1] * self.basis_per_dim[dim + 1];
        }
        strides
    }

    /// Collects the nonzero tensor basis values at a reduced point into
    /// `(global_index, value)` pairs. Empty outside the support.
    pub fn eval_point(&self, xi: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let dp = self.dprime();
        debug_assert_eq!(xi.len(), dp);
        let mut firsts = [0usize; MAX_DPRIME];
        let mut counts = [0usize; MAX_DPRIME];
        let mut vals = [[0.0f64; MAX_DEGREE + 1]; MAX_DPRIME];
        for dim in 0..dp {
            match self.eval_dim(dim, xi[dim], &mut vals[dim]) {
                Some((f, c)) => {
                    firsts[dim] = f;
                    counts[dim] = c;
                }
                None => return,
            }
        }
        let strides = self.strides();
        let mut odo = [0usize; MAX_DPRIME];
        loop {
            let mut idx = 0usize;
            let mut value = 1.0;
            for dim in 0..dp {
                idx += (firsts[dim] + odo[dim]) * strides[dim];
                value *= vals[dim][odo[dim]];
            }
            out.push((idx, value));
            // advance odometer
            let mut dim = dp;
            loop {
                if dim == 0 {
                    return;
                }
                dim -= 1;
                odo[dim] += 1;
                if odo[dim] < counts[dim] {
                    break;
                }
                odo[dim] = 0;
            }
        }
    }
}

/// Optimal total basis count `ceil((LM / ln(LM))^(d'/(d'+2)))`.
pub fn optimal_basis_count(l: usize, m: usize, dprime: usize) -> usize {
    let lm = (l * m) as f64;
    assert!(lm >= 3.0, "need L*M >= 3 observations");
    let base = lm / lm.ln();
    base.powf(dprime as f64 / (dprime as f64 + 2.0)).ceil() as usize
}

/// Per-dimension count for a tensor basis totaling (at least) `n_total`.
pub fn per_dim_count(n_total: usize, dprime: usize) -> usize {
    (n_total as f64).powf(1.0 / dprime as f64).ceil() as usize
}

/// Regression targets at or below this magnitude are treated as no-signal
/// when estimating the kernel support.
pub const SUPPORT_SIGNAL_TOL: f64 = 1e-12;

/// Per-dimension `[min, max]` of the projected training features, each side
/// expanded by 1% of the range (degenerate ranges widen to 1e-6).
///
/// Samples whose regression target is numerically zero carry no kernel
/// signal and are excluded, so compactly supported kernels get a support
/// estimate matching where the kernel acts; if every target is zero all
/// samples are used.
pub fn estimate_support(samples: &RegressionSamples, reduction: &ReductionMap) -> Result<Vec<[f64; 2]>> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot estimate support from zero samples".into()));
    }
    if reduction.dim() != samples.dim {
        return Err(Error::Usage("reduction dimension does not match samples".into()));
    }
    let dp = reduction.dprime();
    let mut lo = vec![f64::INFINITY; dp];
    let mut hi = vec![f64::NEG_INFINITY; dp];
    let mut proj = vec![0.0; dp];
    let mut any = false;
    for pass in 0..2 {
        for q in 0..samples.len() {
            if pass == 0 && samples.zs[q].abs() <= SUPPORT_SIGNAL_TOL {
                continue;
            }
            any = true;
            reduction.project(samples.y(q), &mut proj);
            for k in 0..dp {
                lo[k] = lo[k].min(proj[k]);
                hi[k] = hi[k].max(proj[k]);
            }
        }
        if any {
            break;
        }
    }
    Ok((0..dp)
        .map(|k| {
            let range = hi[k] - lo[k];
            if range > 0.0 {
                [lo[k] - 0.01 * range, hi[k] + 0.01 * range]
            } else {
                [lo[k] - 5e-7, lo[k] + 5e-7]
            }
        })
        .collect())
}

/// Fitted kernel: spline coefficients over a reduction map.
#[derive(Debug, Clone)]
pub struct KernelModel {
    pub space: HypothesisSpace,
    pub coefficients: Vec<f64>,
    pub reduction: ReductionMap,
}

impl KernelModel {
    /// Evaluates at a reduced point; zero outside the support.
    pub fn eval_reduced(&self, xi: &[f64]) -> f64 {
        let dp = self.space.dprime();
        debug_assert_eq!(xi.len(), dp);
        let mut firsts = [0usize; MAX_DPRIME];
        let mut counts = [0usize; MAX_DPRIME];
        let mut vals = [[0.0f64; MAX_DEGREE + 1]; MAX_DPRIME];
        for dim in 0..dp {
            match self.space.eval_dim(dim, xi[dim], &mut vals[dim]) {
                Some((f, c)) => {
                    firsts[dim] = f;
                    counts[dim] = c;
                }
                None => return 0.0,
            }
        }
        let strides = self.space.strides();
        let mut acc = 0.0;
        let mut odo = [0usize; MAX_DPRIME];
        loop {
            let mut idx = 0usize;
            let mut value = 1.0;
            for dim in 0..dp {
                idx += (firsts[dim] + odo[dim]) * strides[dim];
                value *= vals[dim][odo[dim]];
            }
            acc += self.coefficients[idx] * value;
            let mut dim = dp;
            loop {
                if dim == 0 {
                    return acc;
                }
                dim -= 1;
                odo[dim] += 1;
                if odo[dim] < counts[dim] {
                    break;
                }
                odo[dim] = 0;
            }
        }
    }

    /// Evaluates at a feature vector by projecting through the reduction map.
    pub fn eval_feature(&self, y: &[f64]) -> f64 {
        let mut proj = [0.0f64; MAX_DPRIME];
        let dp = self.reduction.dprime();
        self.reduction.project(y, &mut proj[..dp]);
        self.eval_reduced(&proj[..dp])
    }

    /// The model as a pair-interaction kernel on agent states.
    pub fn as_kernel(self: &std::sync::Arc<Self>) -> ModelKernel {
        ModelKernel { model: std::sync::Arc::clone(self) }
    }
}

const MAX_STACK_FEATURES: usize = 64;

/// [`InteractionKernel`] adapter evaluating a fitted model on state pairs.
pub struct ModelKernel {
    model: std::sync::Arc<KernelModel>,
}

impl InteractionKernel for ModelKernel {
    fn eval(&self, xi: &[f64], xj: &[f64]) -> f64 {
        let dim = self.model.reduction.dim();
        debug_assert!(dim <= MAX_STACK_FEATURES, "state dimension too large");
        let mut buf = [0.0f64; MAX_STACK_FEATURES];
        feature_map_into(xi, xj, &mut buf[..dim]);
        self.model.eval_feature(&buf[..dim])
    }
}

const FIT_CHUNK: usize = 512;

/// Normal system `(A, b)` of the quadratic error functional, scaled by
/// `1/(NLM)`; the minimizer solves `A c = b`.
pub fn assemble_normal_system(
    data: &TrajectorySet,
    reduction: &ReductionMap,
    space: &HypothesisSpace,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if feature_dim(data.d) != reduction.dim() {
        return Err(Error::Usage(format!(
            "feature dimension {} does not match reduction input {}",
            feature_dim(data.d),
            reduction.dim()
        )));
    }
    if space.dprime() != reduction.dprime() {
        return Err(Error::Usage("hypothesis space dimension differs from reduction".into()));
    }
    let n_basis = space.n_total;
    let n_agents = data.n_agents;
    let d = data.d;
    let dim = reduction.dim();
    let n_chunks = data.m.div_ceil(FIT_CHUNK);

    let partials: Vec<(DMatrix<f64>, DVector<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * FIT_CHUNK;
            let end = ((c + 1) * FIT_CHUNK).min(data.m);
            let mut a = DMatrix::<f64>::zeros(n_basis, n_basis);
            let mut b = DVector::<f64>::zeros(n_basis);
            let mut y = vec![0.0; dim];
            let mut proj = vec![0.0; space.dprime()];
            let mut basis: Vec<(usize, f64)> = Vec::new();
            // per-velocity-slot predictor entries (basis index, d-vector)
            let mut entries: Vec<(usize, Vec<f64>)> = Vec::new();
            for m in start..end {
                for l in 0..data.l_times {
                    for i in 0..n_agents {
                        entries.clear();
                        let xi = data.agent_state(m, l, i);
                        for ip in 0..n_agents {
                            if ip == i {
                                continue;
                            }
                            let xip = data.agent_state(m, l, ip);
                            let mut dist2 = 0.0;
                            for k in 0..d {
                                let diff = xip[k] - xi[k];
                                dist2 += diff * diff;
                            }
                            if dist2.sqrt() <= PAIR_TOLERANCE {
                                continue;
                            }
                            feature_map_into(xi, xip, &mut y);
                            reduction.project(&y, &mut proj);
                            space.eval_point(&proj, &mut basis);
                            for &(k_idx, val) in &basis {
                                let scaled = val / n_agents as f64;
                                match entries.iter_mut().find(|(k, _)| *k == k_idx) {
                                    Some((_, g)) => {
                                        for k in 0..d {
                                            g[k] += scaled * (xip[k] - xi[k]);
                                        }
                                    }
                                    None => {
                                        let mut g = vec![0.0; d];
                                        for k in 0..d {
                                            g[k] = scaled * (xip[k] - xi[k]);
                                        }
                                        entries.push((k_idx, g));
                                    }
                                }
                            }
                        }
                        let vi = data.agent_velocity(m, l, i);
                        for (k1, g1) in &entries {
                            let mut dot_v = 0.0;
                            for k in 0..d {
                                dot_v += vi[k] * g1[k];
                            }
                            b[*k1] += dot_v;
                            for (k2, g2) in &entries {
                                let mut dot = 0.0;
                                for k in 0..d {
                                    dot += g1[k] * g2[k];
                                }
                                a[(*k1, *k2)] += dot;
                            }
                        }
                    }
                }
            }
            (a, b)
        })
        .collect();

    let mut a = DMatrix::<f64>::zeros(n_basis, n_basis);
    let mut b = DVector::<f64>::zeros(n_basis);
    for (pa, pb) in partials {
        a += pa;
        b += pb;
    }
    let scale = 1.0 / (n_agents * data.l_times * data.m.max(1)) as f64;
    a.scale_mut(scale);
    b.scale_mut(scale);
    Ok((a, b))
}

/// Ridge applied (times the trace) when the normal matrix is singular.
pub const FIT_RIDGE_SCALE: f64 = 1e-12;

/// Minimizes the error functional over the given space.
///
/// Basis functions with no sample support (zero normal-matrix diagonal) get
/// zero coefficients; the remaining system is solved by Cholesky with a
/// ridge fallback.
pub fn fit_kernel(
    data: &TrajectorySet,
    reduction: &ReductionMap,
    space: HypothesisSpace,
) -> Result<KernelModel> {
    let (a, b) = assemble_normal_system(data, reduction, &space)?;
    let n = space.n_total;
    let supported: Vec<usize> = (0..n).filter(|&k| a[(k, k)] > 0.0).collect();
    if supported.is_empty() {
        return Err(Error::Conditioning(
            "no basis function has sample support; support box misses the data".into(),
        ));
    }
    if supported.len() < n {
        log::info!("{} of {} basis functions have empty sample support", n - supported.len(), n);
    }
    let ns = supported.len();
    let a_red = DMatrix::from_fn(ns, ns, |r, c| a[(supported[r], supported[c])]);
    let b_red = DVector::from_fn(ns, |r, _| b[supported[r]]);
    let (x_red, ridged) = solve_spd(&a_red, &b_red, FIT_RIDGE_SCALE).map_err(|_| {
        Error::Conditioning(format!(
            "normal matrix singular beyond ridge; {} empty-support basis functions",
            n - supported.len()
        ))
    })?;
    if ridged {
        log::warn!("kernel fit required a ridge fallback");
    }
    let mut coefficients = vec![0.0; n];
    for (r, &k) in supported.iter().enumerate() {
        coefficients[k] = x_red[r];
    }
    Ok(KernelModel { space, coefficients, reduction: reduction.clone() })
}

/// Value of the error functional for the given coefficients.
pub fn objective(
    data: &TrajectorySet,
    reduction: &ReductionMap,
    space: &HypothesisSpace,
    coefficients: &[f64],
) -> f64 {
    let n_agents = data.n_agents;
    let d = data.d;
    let dim = reduction.dim();
    let n_chunks = data.m.div_ceil(FIT_CHUNK);
    let sums: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * FIT_CHUNK;
            let end = ((c + 1) * FIT_CHUNK).min(data.m);
            let mut y = vec![0.0; dim];
            let mut proj = vec![0.0; space.dprime()];
            let mut basis: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            let mut pred = vec![0.0; d];
            for m in start..end {
                for l in 0..data.l_times {
                    for i in 0..n_agents {
                        pred.iter_mut().for_each(|v| *v = 0.0);
                        let xi = data.agent_state(m, l, i);
                        for ip in 0..n_agents {
                            if ip == i {
                                continue;
                            }
                            let xip = data.agent_state(m, l, ip);
                            feature_map_into(xi, xip, &mut y);
                            reduction.project(&y, &mut proj);
                            space.eval_point(&proj, &mut basis);
                            let mut psi = 0.0;
                            for &(k_idx, val) in &basis {
                                psi += coefficients[k_idx] * val;
                            }
                            for k in 0..d {
                                pred[k] += psi * (xip[k] - xi[k]) / n_agents as f64;
                            }
                        }
                        let vi = data.agent_velocity(m, l, i);
                        for k in 0..d {
                            let r = vi[k] - pred[k];
                            total += r * r;
                        }
                    }
                }
            }
            total
        })
        .collect();
    sums.iter().sum::<f64>() / (n_agents * data.l_times * data.m.max(1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, SystemSpec, UniformBox};
    use crate::mpls::Provenance;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    #[test]
    fn basis_count_formula() {
        assert_eq!(optimal_basis_count(5, 50_000, 1), 28);
        assert_eq!(optimal_basis_count(5, 50_000, 2), 142);
        assert_eq!(per_dim_count(142, 2), 12);
        assert_eq!(optimal_basis_count(3, 1, 1), 2);
    }

    #[test]
    fn support_examples() {
        // three projected values with all-nonzero targets
        let mut samples = RegressionSamples::new(1);
        for (v, z) in [(0.1, 1.0), (0.5, 2.0), (0.9, 1.5)] {
            let y = [v, 0.0, 0.0, 0.0, 0.0];
            samples.push(&y, z, 1.0);
        }
        let reduction = ReductionMap::new(
            DMatrix::from_row_slice(1, 5, &[1.0, 0.0, 0.0, 0.0, 0.0]),
            Provenance::Oracle,
        )
        .unwrap();
        let support = estimate_support(&samples, &reduction).unwrap();
        assert_relative_eq!(support[0][0], 0.092, epsilon = 1e-12);
        assert_relative_eq!(support[0][1], 0.908, epsilon = 1e-12);

        // degenerate range
        let mut flat = RegressionSamples::new(1);
        for _ in 0..3 {
            flat.push(&[0.4, 0.0, 0.0, 0.0, 0.0], 1.0, 1.0);
        }
        let s = estimate_support(&flat, &reduction).unwrap();
        assert_relative_eq!(s[0][0], 0.4 - 5e-7, epsilon = 1e-15);
        assert_relative_eq!(s[0][1], 0.4 + 5e-7, epsilon = 1e-15);

        // zero-signal samples are ignored for the range
        let mut mixed = RegressionSamples::new(1);
        mixed.push(&[0.2, 0.0, 0.0, 0.0, 0.0], 1.0, 1.0);
        mixed.push(&[0.6, 0.0, 0.0, 0.0, 0.0], 0.5, 1.0);
        mixed.push(&[5.0, 0.0, 0.0, 0.0, 0.0], 0.0, 1.0);
        let s = estimate_support(&mixed, &reduction).unwrap();
        assert!(s[0][1] < 1.0);
    }

    #[test]
    fn bspline_partition_of_unity() {
        for degree in 0..=3usize {
            let space = HypothesisSpace::uniform(
                BasisFamily::ClampedBspline,
                degree,
                vec![[0.0, 1.0]],
                vec![degree + 5],
            )
            .unwrap();
            let mut out = Vec::new();
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                space.eval_point(&[t], &mut out);
                let sum: f64 = out.iter().map(|(_, v)| v).sum();
                assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
                assert!(out.iter().all(|&(_, v)| v >= -1e-15));
            }
        }
    }

    #[test]
    fn piecewise_constant_indicator_behaviour() {
        let space = HypothesisSpace::uniform(
            BasisFamily::PiecewisePolynomial,
            0,
            vec![[0.0, 1.0]],
            vec![4],
        )
        .unwrap();
        let mut out = Vec::new();
        space.eval_point(&[0.3], &mut out);
        assert_eq!(out, vec![(1, 1.0)]);
        space.eval_point(&[1.0], &mut out);
        assert_eq!(out, vec![(3, 1.0)]);
        space.eval_point(&[1.2], &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn tensor_indices_cover_grid() {
        let space = HypothesisSpace::uniform(
            BasisFamily::ClampedBspline,
            1,
            vec![[0.0, 1.0], [0.0, 2.0]],
            vec![3, 4],
        )
        .unwrap();
        assert_eq!(space.n_total, 12);
        let mut out = Vec::new();
        space.eval_point(&[0.5, 1.0], &mut out);
        assert_eq!(out.len(), 4);
        let sum: f64 = out.iter().map(|(_, v)| v).sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(out.iter().all(|&(i, _)| i < 12));
    }

    fn pl_like_dataset(m: usize, seed: u64) -> (TrajectorySet, ReductionMap) {
        let bench = crate::benchmarks::build_pl();
        let spec = SystemSpec {
            n_agents: 2,
            d: 2,
            t_horizon: 1.0,
            l_times: 5,
            kernel: Arc::clone(&bench.kernel),
            init_box: UniformBox::cube(2, 0.0, 1.0).unwrap(),
            rng_seed: seed,
            substeps: 20,
            name: "pl".into(),
        };
        (generate_dataset(&spec, m).unwrap(), bench.true_b.clone())
    }

    #[test]
    fn constant_kernel_is_recovered_exactly() {
        let c = 0.7;
        let spec = SystemSpec {
            n_agents: 2,
            d: 2,
            t_horizon: 1.0,
            l_times: 5,
            kernel: Arc::new(move |_: &[f64], _: &[f64]| c),
            init_box: UniformBox::cube(2, 0.0, 1.0).unwrap(),
            rng_seed: 4,
            substeps: 20,
            name: "const".into(),
        };
        let data = generate_dataset(&spec, 64).unwrap();
        let bench = crate::benchmarks::build_pl();
        let samples = crate::features::extract_regression_samples(&data).unwrap();
        let support = estimate_support(&samples, &bench.true_b).unwrap();
        let space =
            HypothesisSpace::uniform(BasisFamily::ClampedBspline, 1, support.clone(), vec![6])
                .unwrap();
        let model = fit_kernel(&data, &bench.true_b, space).unwrap();
        for i in 0..=20 {
            let t = support[0][0] + (support[0][1] - support[0][0]) * i as f64 / 20.0;
            assert_relative_eq!(model.eval_reduced(&[t]), c, epsilon = 1e-8);
        }
        // outside support evaluates to zero
        assert_eq!(model.eval_reduced(&[support[0][1] + 1.0]), 0.0);
    }

    #[test]
    fn knot_aligned_discontinuous_kernel_is_recovered() {
        // piecewise-constant kernel of the reduced variable with a step at 0.1:
        // representable exactly by a degree-0 space with a cell edge there
        let bench = crate::benchmarks::build_pl();
        let step = move |xi: &[f64], xj: &[f64]| {
            let mut r2 = 0.0;
            for k in 0..2 {
                let diff = xj[k] - xi[k];
                r2 += diff * diff;
            }
            let v = r2 / 3.464_101_615_137_754_6;
            if v < 0.1 {
                0.4
            } else {
                1.3
            }
        };
        let spec = SystemSpec {
            n_agents: 2,
            d: 2,
            t_horizon: 1.0,
            l_times: 5,
            kernel: Arc::new(step),
            init_box: UniformBox::cube(2, 0.0, 1.0).unwrap(),
            rng_seed: 9,
            substeps: 20,
            name: "step".into(),
        };
        let data = generate_dataset(&spec, 128).unwrap();
        // support [0, 0.2] with 2 cells puts the knot exactly at the jump
        let space = HypothesisSpace::uniform(
            BasisFamily::PiecewisePolynomial,
            0,
            vec![[0.0, 0.2]],
            vec![2],
        )
        .unwrap();
        let model = fit_kernel(&data, &bench.true_b, space).unwrap();
        assert_relative_eq!(model.eval_reduced(&[0.05]), 0.4, epsilon = 1e-6);
        assert_relative_eq!(model.eval_reduced(&[0.15]), 1.3, epsilon = 1e-6);
    }

    #[test]
    fn solution_minimizes_objective() {
        let (data, true_b) = pl_like_dataset(96, 5);
        let samples = crate::features::extract_regression_samples(&data).unwrap();
        let support = estimate_support(&samples, &true_b).unwrap();
        let space =
            HypothesisSpace::uniform(BasisFamily::ClampedBspline, 1, support, vec![8]).unwrap();
        let model = fit_kernel(&data, &true_b, space.clone()).unwrap();
        let e_star = objective(&data, &true_b, &space, &model.coefficients);
        let zero = vec![0.0; space.n_total];
        assert!(e_star <= objective(&data, &true_b, &space, &zero) + 1e-14);
        let mut rng = crate::rng::stream_rng(2, 0);
        use rand::Rng;
        for _ in 0..20 {
            let c: Vec<f64> = (0..space.n_total).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(e_star <= objective(&data, &true_b, &space, &c) + 1e-14);
        }
    }

    #[test]
    fn normal_residual_and_gradient_agree() {
        let (data, true_b) = pl_like_dataset(64, 6);
        let samples = crate::features::extract_regression_samples(&data).unwrap();
        let support = estimate_support(&samples, &true_b).unwrap();
        let space =
            HypothesisSpace::uniform(BasisFamily::ClampedBspline, 1, support, vec![6]).unwrap();
        let model = fit_kernel(&data, &true_b, space.clone()).unwrap();
        let (a, b) = assemble_normal_system(&data, &true_b, &space).unwrap();
        let c = DVector::from_column_slice(&model.coefficients);
        let residual = &a * &c - &b;
        assert!(residual.norm() <= 1e-8 * b.norm());

        // analytic gradient 2(Ac - b) vs central differences, at a point away
        // from the minimum so the comparison is well-scaled
        let mut coeffs = model.coefficients.clone();
        for (i, v) in coeffs.iter_mut().enumerate() {
            *v += 0.25 * ((i % 3) as f64 - 1.0);
        }
        let cv = DVector::from_column_slice(&coeffs);
        let grad = (&a * &cv - &b) * 2.0;
        let h = 1e-6;
        for k in (0..space.n_total).step_by((space.n_total / 10).max(1)) {
            let mut plus = coeffs.clone();
            plus[k] += h;
            let mut minus = coeffs.clone();
            minus[k] -= h;
            let fd = (objective(&data, &true_b, &space, &plus)
                - objective(&data, &true_b, &space, &minus))
                / (2.0 * h);
            assert_relative_eq!(fd, grad[k], max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn refinement_never_increases_objective() {
        let (data, true_b) = pl_like_dataset(64, 7);
        let samples = crate::features::extract_regression_samples(&data).unwrap();
        let support = estimate_support(&samples, &true_b).unwrap();
        for (family, coarse, fine) in [
            (BasisFamily::PiecewisePolynomial, 4usize, 8usize),
            (BasisFamily::ClampedBspline, 5, 9),
        ] {
            let s1 = HypothesisSpace::uniform(family, usize::from(family == BasisFamily::ClampedBspline), support.clone(), vec![coarse]).unwrap();
            let s2 = HypothesisSpace::uniform(family, usize::from(family == BasisFamily::ClampedBspline), support.clone(), vec![fine]).unwrap();
            assert_eq!(s2.cells_per_dim[0], 2 * s1.cells_per_dim[0]);
            let m1 = fit_kernel(&data, &true_b, s1.clone()).unwrap();
            let m2 = fit_kernel(&data, &true_b, s2.clone()).unwrap();
            let e1 = objective(&data, &true_b, &s1, &m1.coefficients);
            let e2 = objective(&data, &true_b, &s2, &m2.coefficients);
            assert!(e2 <= e1 + 1e-12, "{family:?}: refined {e2} > coarse {e1}");
        }
    }

    #[test]
    fn n2_fit_matches_direct_weighted_regression() {
        let (data, true_b) = pl_like_dataset(48, 8);
        let samples = crate::features::extract_regression_samples(&data).unwrap();
        let support = estimate_support(&samples, &true_b).unwrap();
        let space =
            HypothesisSpace::uniform(BasisFamily::ClampedBspline, 1, support, vec![7]).unwrap();
        let model = fit_kernel(&data, &true_b, space.clone()).unwrap();

        // independent oracle: weighted regression of z on the projected
        // features with weights ||x_i - x_{i'}||^2
        let n = space.n_total;
        let mut gram = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        let mut proj = vec![0.0; 1];
        let mut basis = Vec::new();
        for q in 0..samples.len() {
            true_b.project(samples.y(q), &mut proj);
            space.eval_point(&proj, &mut basis);
            let w = samples.weights[q] * samples.weights[q];
            for &(k1, v1) in &basis {
                rhs[k1] += w * v1 * samples.zs[q];
                for &(k2, v2) in &basis {
                    gram[(k1, k2)] += w * v1 * v2;
                }
            }
        }
        let direct = gram.cholesky().unwrap().solve(&rhs);
        for k in 0..n {
            assert_relative_eq!(model.coefficients[k], direct[k], epsilon = 1e-10, max_relative = 1e-7);
        }
    }
}
