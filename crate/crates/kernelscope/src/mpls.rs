//! Multiplicatively Perturbed Least Squares: estimates the feature-reduction
//! map whose row space carries the learned kernel, from regression samples
//! `(y_q, z_q)`.
//!
//! The regression function is decomposed into a linear part plus a nonlinear
//! remainder. The linear slope comes from ordinary least squares on one half
//! of the data; locally reweighted least-squares fits of the residuals on the
//! other half produce slope perturbations whose top singular directions span
//! the remaining reduced variables.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RegressionSamples;
use crate::linalg::{operator_norm, orthonormal_complement, solve_spd};
use crate::rng::{derive_seed, stream_rng, TAG_CENTERS};

/// How the rows of a [`ReductionMap`] were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    MplsWithBeta,
    MplsWithoutBeta,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Oracle => "oracle",
            Provenance::MplsWithBeta => "mpls_with_beta",
            Provenance::MplsWithoutBeta => "mpls_without_beta",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Provenance::Oracle),
            "mpls_with_beta" => Ok(Provenance::MplsWithBeta),
            "mpls_without_beta" => Ok(Provenance::MplsWithoutBeta),
            other => Err(Error::Format(format!("unknown provenance '{other}'"))),
        }
    }
}

/// A d' x D matrix with orthonormal rows mapping feature vectors to the
/// reduced variables.
#[derive(Debug, Clone)]
pub struct ReductionMap {
    pub rows: DMatrix<f64>,
    pub provenance: Provenance,
}

pub const ORTHONORMALITY_TOL: f64 = 1e-10;

impl ReductionMap {
    pub fn new(rows: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        let map = Self { rows, provenance };
        let defect = map.orthonormality_defect();
        if defect > ORTHONORMALITY_TOL {
            return Err(Error::Usage(format!(
                "reduction rows not orthonormal: defect {defect:.3e}"
            )));
        }
        Ok(map)
    }

    pub fn dprime(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// `|| rows rows^T - I ||` in the operator norm.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = &self.rows * self.rows.transpose();
        let id = DMatrix::<f64>::identity(self.dprime(), self.dprime());
        operator_norm(&(gram - id))
    }

    /// Projects a feature vector onto the reduced variables.
    pub fn project(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.dim());
        debug_assert_eq!(out.len(), self.dprime());
        for r in 0..self.dprime() {
            let mut acc = 0.0;
            for c in 0..self.dim() {
                acc += self.rows[(r, c)] * y[c];
            }
            out[r] = acc;
        }
    }
}

/// Where the perturbation centers come from.
#[derive(Debug, Clone)]
pub enum CenterSelection {
    /// Uniform draw without replacement from the sample feature vectors.
    RandomSubset,
    /// Caller-provided points in feature space.
    Provided(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct MplsConfig {
    /// Number of perturbation centers.
    pub k: usize,
    /// Weight bandwidth; defaults to `1 / D`.
    pub lambda: Option<f64>,
    pub split_seed: u64,
    pub centers: CenterSelection,
    /// Project centers onto the orthogonal complement of the linear slope
    /// before computing weights, so distances are measured in the space the
    /// residual features live in.
    pub project_centers: bool,
    /// Run the perturbation machinery in per-coordinate standardized feature
    /// coordinates. The feature coordinates mix states with their products,
    /// so their scales differ by orders of magnitude; the `1/D` bandwidth
    /// only weights neighborhoods sensibly after standardization.
    pub standardize: bool,
}

impl Default for MplsConfig {
    fn default() -> Self {
        Self {
            k: 50,
            lambda: None,
            split_seed: 0,
            centers: CenterSelection::RandomSubset,
            project_centers: true,
            standardize: true,
        }
    }
}

/// Raw algorithm output: linear slope, nonlinear directions, and the
/// singular values of the stacked slope perturbations.
#[derive(Debug, Clone)]
pub struct MplsOutput {
    pub beta_hat: DVector<f64>,
    /// Constant term of the degree-one fit; the feature map has no constant
    /// column, so leaving it out would force the slope to absorb the
    /// kernel's offset and tilt it away from the reduced subspace.
    pub intercept: f64,
    /// d' x D, rows orthonormal and orthogonal to `beta_hat`.
    pub a_hat: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

const BETA_NULL_TOL: f64 = 1e-12;

/// Runs the four-step slope-perturbation estimation.
///
/// The samples are split into halves: the linear slope is fitted on one and
/// never sees the other; the perturbation fits see only the second half.
pub fn mpls(samples: &RegressionSamples, dprime: usize, cfg: &MplsConfig) -> Result<MplsOutput> {
    let q = samples.len();
    let dim = samples.dim;
    if dprime == 0 || dprime > dim {
        return Err(Error::Usage(format!("d' = {dprime} out of range for D = {dim}")));
    }
    if cfg.k < dprime {
        return Err(Error::Usage(format!("K = {} smaller than d' = {dprime}", cfg.k)));
    }
    if q < (2 * dim).max(2 * cfg.k) {
        return Err(Error::Usage(format!(
            "Q = {q} too small: need at least max(2D, 2K) = {}",
            (2 * dim).max(2 * cfg.k)
        )));
    }
    let lambda = cfg.lambda.unwrap_or(1.0 / dim as f64);
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }

    // Disjoint halves: beta is fitted on s_prime, perturbations on s.
    let mut order: Vec<u32> = (0..q as u32).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = stream_rng(cfg.split_seed, 0);
        order.shuffle(&mut rng);
    }
    let half = q / 2;
    let (s_prime_idx, s_idx) = order.split_at(half);

    // Standardization transform: the algorithm's geometry (weights,
    // complement, singular directions) lives in these coordinates.
    let (shift, scale) = if cfg.standardize {
        let mut mean = vec![0.0f64; dim];
        for qi in 0..q {
            let y = samples.y(qi);
            for c in 0..dim {
                mean[c] += y[c];
            }
        }
        for m in mean.iter_mut() {
            *m /= q as f64;
        }
        let mut var = vec![0.0f64; dim];
        for qi in 0..q {
            let y = samples.y(qi);
            for c in 0..dim {
                let d = y[c] - mean[c];
                var[c] += d * d;
            }
        }
        let scale: Vec<f64> =
            var.iter().map(|v| (v / q as f64).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        (mean, scale)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let standardized =
        |y: &[f64], out: &mut [f64]| {
            for c in 0..dim {
                out[c] = (y[c] - shift[c]) / scale[c];
            }
        };

    // Step 1: ordinary least squares of z on the degree-one polynomials of
    // the standardized features (constant column plus coordinates).
    let design = DMatrix::from_fn(s_prime_idx.len(), dim + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            let qi = s_prime_idx[r] as usize;
            (samples.ys[qi * dim + (c - 1)] - shift[c - 1]) / scale[c - 1]
        }
    });
    let targets = DVector::from_fn(s_prime_idx.len(), |r, _| samples.zs[s_prime_idx[r] as usize]);
    let affine = crate::linalg::lstsq(&design, &targets)
        .map_err(|e| Error::Conditioning(format!("slope regression failed: {e}")))?;
    drop(design);
    drop(targets);
    let alpha = affine[0];
    let beta_std = DVector::from_fn(dim, |c, _| affine[c + 1]);
    // the same affine predictor expressed on raw features
    let beta_hat = DVector::from_fn(dim, |c, _| beta_std[c] / scale[c]);
    let intercept = alpha - (0..dim).map(|c| beta_std[c] * shift[c] / scale[c]).sum::<f64>();

    let beta_norm = beta_std.norm();
    // Basis of the subspace the residual features live in (standardized).
    let complement = if beta_norm > BETA_NULL_TOL {
        orthonormal_complement(&beta_std)
    } else {
        DMatrix::identity(dim, dim)
    };
    let red_dim = complement.ncols();

    // Step 2: residual data on the held-out half, standardized features
    // projected onto the complement of the slope.
    let n_s = s_idx.len();
    let mut reduced = DMatrix::zeros(n_s, red_dim);
    let mut residuals = DVector::zeros(n_s);
    let mut y_std = vec![0.0; dim];
    for (r, &qi) in s_idx.iter().enumerate() {
        standardized(samples.y(qi as usize), &mut y_std);
        let mut pred = alpha;
        for c in 0..dim {
            pred += beta_std[c] * y_std[c];
        }
        residuals[r] = samples.zs[qi as usize] - pred;
        for rc in 0..red_dim {
            let mut acc = 0.0;
            for c in 0..dim {
                acc += complement[(c, rc)] * y_std[c];
            }
            reduced[(r, rc)] = acc;
        }
    }

    // Step 3 centers in standardized coordinates, plus the squared distance
    // of each center from the complement subspace (a per-center weight
    // factor that vanishes when centers are projected).
    let centers: Vec<Vec<f64>> = match &cfg.centers {
        CenterSelection::Provided(list) => {
            for u in list {
                if u.len() != dim {
                    return Err(Error::Usage("provided center has wrong dimension".into()));
                }
            }
            list.clone()
        }
        CenterSelection::RandomSubset => {
            let mut rng = stream_rng(derive_seed(cfg.split_seed, TAG_CENTERS, 0), 0);
            rand::seq::index::sample(&mut rng, q, cfg.k)
                .iter()
                .map(|qi| samples.y(qi).to_vec())
                .collect()
        }
    };
    let k = centers.len();
    if k < dprime {
        return Err(Error::Usage(format!("{k} centers provided but d' = {dprime}")));
    }
    let center_info: Vec<(Vec<f64>, f64)> = centers
        .iter()
        .map(|u| {
            let mut u_std = vec![0.0; dim];
            standardized(u, &mut u_std);
            let mut u_red = vec![0.0; red_dim];
            let mut norm2 = 0.0;
            for (c, &uc) in u_std.iter().enumerate() {
                norm2 += uc * uc;
                for rc in 0..red_dim {
                    u_red[rc] += complement[(c, rc)] * uc;
                }
            }
            let red_norm2: f64 = u_red.iter().map(|v| v * v).sum();
            let extra = if cfg.project_centers { 0.0 } else { (norm2 - red_norm2).max(0.0) };
            (u_red, extra)
        })
        .collect();

    // Shared factorization: the per-center problems differ only in their
    // right-hand sides.
    let qr = reduced.clone().qr();
    let r_mat = qr.r();
    let qr_ok = {
        let mut max = 0.0f64;
        let mut min = f64::INFINITY;
        for i in 0..red_dim {
            let v = r_mat[(i, i)].abs();
            max = max.max(v);
            min = min.min(v);
        }
        max > 0.0 && min > 1e-12 * max
    };
    let gram_fallback = if qr_ok { None } else { Some(reduced.transpose() * &reduced) };

    let perturbations: Vec<Result<Vec<f64>>> = center_info
        .par_iter()
        .map(|(u_red, extra)| {
            // weights w = exp(-lambda ||y_red - u_red||^2 + extra)
            let mut weights = vec![0.0f64; n_s];
            let mut wsum = 0.0;
            let mut wr = 0.0;
            for r in 0..n_s {
                let mut dist2 = *extra;
                for rc in 0..red_dim {
                    let diff = reduced[(r, rc)] - u_red[rc];
                    dist2 += diff * diff;
                }
                let w = (-lambda * dist2).exp();
                weights[r] = w;
                wsum += w;
                wr += w * residuals[r];
            }
            let wmean = if wsum > 0.0 { wr / wsum } else { 0.0 };
            let target = DVector::from_fn(n_s, |r, _| weights[r] * (residuals[r] - wmean));
            let p_red = if let Some(gram) = &gram_fallback {
                let rhs = reduced.transpose() * &target;
                let (x, _) = solve_spd(gram, &rhs, 1e-10)?;
                x
            } else {
                let mut qtb = target;
                qr.q_tr_mul(&mut qtb);
                let top = DVector::from_iterator(red_dim, qtb.iter().take(red_dim).copied());
                r_mat
                    .solve_upper_triangular(&top)
                    .ok_or_else(|| Error::Conditioning("perturbation solve failed".into()))?
            };
            // back to standardized ambient coordinates
            let mut p = vec![0.0; dim];
            for c in 0..dim {
                let mut acc = 0.0;
                for rc in 0..red_dim {
                    acc += complement[(c, rc)] * p_red[rc];
                }
                p[c] = acc;
            }
            Ok(p)
        })
        .collect();

    let mut p_hat = DMatrix::zeros(k, dim);
    for (i, row) in perturbations.into_iter().enumerate() {
        let row = row?;
        for c in 0..dim {
            p_hat[(i, c)] = row[c];
        }
    }

    // Step 4: top right-singular directions of the stacked perturbations,
    // expressed back on raw features (a direction u in standardized
    // coordinates is the raw-feature functional <u / scale, y>) and
    // re-orthonormalized there.
    let svd = p_hat.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Conditioning("SVD of perturbations failed".into()))?;
    let mut mapped = v_t.rows(0, dprime).into_owned();
    for r in 0..dprime {
        for c in 0..dim {
            mapped[(r, c)] /= scale[c];
        }
    }
    let a_hat = orthonormalize_rows(&mapped, dprime)?;

    Ok(MplsOutput { beta_hat, intercept, a_hat, singular_values: svd.singular_values })
}

/// Modified Gram-Schmidt over matrix rows, keeping their order.
fn orthonormalize_rows(m: &DMatrix<f64>, count: usize) -> Result<DMatrix<f64>> {
    let dim = m.ncols();
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(count);
    for r in 0..m.nrows() {
        if rows.len() == count {
            break;
        }
        let mut v = m.row(r).transpose().into_owned();
        for u in &rows {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        let norm = v.norm();
        if norm > 1e-12 {
            rows.push(v / norm);
        }
    }
    if rows.len() < count {
        return Err(Error::Conditioning(
            "singular directions collapsed while re-orthonormalizing".into(),
        ));
    }
    let mut out = DMatrix::zeros(count, dim);
    for (r, v) in rows.iter().enumerate() {
        out.row_mut(r).copy_from(&v.transpose());
    }
    canonicalize_row_signs(&mut out);
    Ok(out)
}

/// Flips row signs so the largest-magnitude entry of each row is positive.
fn canonicalize_row_signs(m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for c in 0..m.ncols() {
            if m[(r, c)].abs() > best_abs {
                best_abs = m[(r, c)].abs();
                best = c;
            }
        }
        if m[(r, best)] < 0.0 {
            for c in 0..m.ncols() {
                m[(r, c)] = -m[(r, c)];
            }
        }
    }
}

/// Bin count of the one-dimensional constant-spline comparison fits.
pub const SELECTION_BINS: usize = 28;

/// Residual sum of squares of a piecewise-constant fit of `z` against the
/// projections `<y, direction>` on a uniform partition.
fn constant_spline_rss(samples: &RegressionSamples, direction: &DVector<f64>) -> f64 {
    let q = samples.len();
    let dim = samples.dim;
    let mut proj = vec![0.0; q];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..q {
        let y = samples.y(i);
        let mut acc = 0.0;
        for c in 0..dim {
            acc += direction[c] * y[c];
        }
        proj[i] = acc;
        lo = lo.min(acc);
        hi = hi.max(acc);
    }
    if !(hi > lo) {
        let mean = samples.zs.iter().sum::<f64>() / q as f64;
        return samples.zs.iter().map(|z| (z - mean) * (z - mean)).sum();
    }
    let scale = SELECTION_BINS as f64 / (hi - lo);
    let bin_of = |t: f64| (((t - lo) * scale) as usize).min(SELECTION_BINS - 1);
    let mut sums = vec![0.0f64; SELECTION_BINS];
    let mut counts = vec![0usize; SELECTION_BINS];
    for i in 0..q {
        let b = bin_of(proj[i]);
        sums[b] += samples.zs[i];
        counts[b] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut rss = 0.0;
    for i in 0..q {
        let diff = samples.zs[i] - means[bin_of(proj[i])];
        rss += diff * diff;
    }
    rss
}

/// Assembles the estimated reduction map, deciding whether the linear slope
/// direction earns a row: the direction whose one-dimensional constant-spline
/// fit of `z` has smaller residual wins the comparison against the last kept
/// singular direction.
pub fn assemble_reduction(
    samples: &RegressionSamples,
    output: &MplsOutput,
    dprime: usize,
) -> Result<ReductionMap> {
    let dim = samples.dim;
    if output.a_hat.nrows() < dprime || output.a_hat.ncols() != dim {
        return Err(Error::Usage("MPLS output does not match requested d'".into()));
    }
    let beta_norm = output.beta_hat.norm();
    if beta_norm <= BETA_NULL_TOL {
        return ReductionMap::new(
            output.a_hat.rows(0, dprime).into_owned(),
            Provenance::MplsWithoutBeta,
        );
    }
    let beta_unit = &output.beta_hat / beta_norm;
    let rss_beta = constant_spline_rss(samples, &beta_unit);
    let last_row = output.a_hat.row(dprime - 1).transpose().into_owned();
    let rss_a = constant_spline_rss(samples, &last_row);
    if rss_beta < rss_a {
        // slope direction first, singular directions orthogonalized behind it
        let mut stacked = DMatrix::zeros(output.a_hat.nrows() + 1, dim);
        stacked.row_mut(0).copy_from(&beta_unit.transpose());
        for r in 0..output.a_hat.nrows() {
            stacked.row_mut(r + 1).copy_from(&output.a_hat.row(r));
        }
        let rows = orthonormalize_rows(&stacked, dprime)?;
        ReductionMap::new(rows, Provenance::MplsWithBeta)
    } else {
        ReductionMap::new(output.a_hat.rows(0, dprime).into_owned(), Provenance::MplsWithoutBeta)
    }
}

/// Subspace distance `|| B^T B - Bhat^T Bhat ||` in the operator 2-norm.
pub fn err_b(truth: &ReductionMap, estimate: &ReductionMap) -> Result<f64> {
    check_same_shape(truth, estimate)?;
    Ok(operator_norm(&projection_difference(truth, estimate)))
}

/// Frobenius-norm variant of [`err_b`], reported alongside for transparency.
pub fn err_b_frobenius(truth: &ReductionMap, estimate: &ReductionMap) -> Result<f64> {
    check_same_shape(truth, estimate)?;
    Ok(projection_difference(truth, estimate).norm())
}

fn check_same_shape(a: &ReductionMap, b: &ReductionMap) -> Result<()> {
    if a.dim() != b.dim() || a.dprime() != b.dprime() {
        return Err(Error::Usage(format!(
            "reduction maps have different shapes: {}x{} vs {}x{}",
            a.dprime(),
            a.dim(),
            b.dprime(),
            b.dim()
        )));
    }
    Ok(())
}

fn projection_difference(a: &ReductionMap, b: &ReductionMap) -> DMatrix<f64> {
    a.rows.transpose() * &a.rows - b.rows.transpose() * &b.rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn synthetic_linear_samples(q: usize, dim_d: usize, seed: u64) -> RegressionSamples {
        // z = <e1, y> over random feature vectors; d chosen so feature_dim(d) fits
        let d = dim_d;
        let mut rng = crate::rng::stream_rng(seed, 0);
        let mut samples = RegressionSamples::new(d);
        let dim = samples.dim;
        let mut y = vec![0.0; dim];
        for _ in 0..q {
            let xi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xj: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            crate::features::feature_map_into(&xi, &xj, &mut y);
            samples.push(&y, y[0], 1.0);
        }
        samples
    }

    #[test]
    fn linear_kernel_recovers_beta() {
        let samples = synthetic_linear_samples(4000, 2, 5);
        let out = mpls(&samples, 1, &MplsConfig::default()).unwrap();
        let mut expected = DVector::zeros(samples.dim);
        expected[0] = 1.0;
        assert!((&out.beta_hat - &expected).norm() <= 1e-8, "beta error too large");

        let reduction = assemble_reduction(&samples, &out, 1).unwrap();
        assert_eq!(reduction.provenance, Provenance::MplsWithBeta);
        let truth = ReductionMap::new(
            DMatrix::from_row_slice(1, samples.dim, expected.as_slice()),
            Provenance::Oracle,
        )
        .unwrap();
        assert!(err_b(&truth, &reduction).unwrap() <= 1e-6);
    }

    #[test]
    fn null_signal_gives_zero_beta_and_perturbations() {
        let mut samples = synthetic_linear_samples(1000, 2, 6);
        for z in samples.zs.iter_mut() {
            *z = 0.0;
        }
        let out = mpls(&samples, 1, &MplsConfig::default()).unwrap();
        assert!(out.beta_hat.norm() <= 1e-12);
        assert!(out.singular_values.iter().all(|s| s.abs() <= 1e-12));
        let reduction = assemble_reduction(&samples, &out, 1).unwrap();
        assert_eq!(reduction.provenance, Provenance::MplsWithoutBeta);
    }

    #[test]
    fn a_rows_are_orthonormal() {
        // nonlinear kernel: z = (<e1,y>)^2 mixes linear and quadratic content
        let mut samples = synthetic_linear_samples(4000, 2, 7);
        let dim = samples.dim;
        for q in 0..samples.len() {
            let y0 = samples.ys[q * dim];
            samples.zs[q] = y0 * y0 + 0.3 * y0;
        }
        let out = mpls(&samples, 2, &MplsConfig::default()).unwrap();
        let gram = &out.a_hat * out.a_hat.transpose();
        assert_relative_eq!(gram, DMatrix::identity(2, 2), epsilon = 1e-10);
    }

    #[test]
    fn nonlinear_single_index_direction_is_recovered() {
        // z depends on one purely nonlinear index with no net linear trend;
        // the slope carries no information, the perturbation directions must
        // find the index. Feature scales are deliberately heterogeneous.
        let mut rng = crate::rng::stream_rng(21, 0);
        let d = 2;
        let mut samples = RegressionSamples::new(d);
        let dim = samples.dim;
        let mut y = vec![0.0; dim];
        let dir: Vec<f64> = {
            // unit vector in the pure-quadratic block
            let mut v = vec![0.0; dim];
            v[4] = 0.6;
            v[7] = 0.8;
            v
        };
        let mut projections = Vec::new();
        let mut rows = Vec::new();
        for _ in 0..20_000 {
            let xi: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..5.0)).collect();
            let xj: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..5.0)).collect();
            crate::features::feature_map_into(&xi, &xj, &mut y);
            let t: f64 = (0..dim).map(|c| dir[c] * y[c]).sum();
            projections.push(t);
            rows.push(y.clone());
        }
        let t_mean = projections.iter().sum::<f64>() / projections.len() as f64;
        let t_span = projections.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t_mean;
        for (row, &t) in rows.iter().zip(&projections) {
            // even function of the centered index: no linear component
            let u = (t - t_mean) / t_span;
            samples.push(row, u * u, 1.0);
        }
        let out = mpls(&samples, 1, &MplsConfig { split_seed: 3, ..Default::default() }).unwrap();
        let reduction = assemble_reduction(&samples, &out, 1).unwrap();
        let truth = ReductionMap::new(
            DMatrix::from_row_slice(1, dim, &dir),
            Provenance::Oracle,
        )
        .unwrap();
        let err = err_b(&truth, &reduction).unwrap();
        assert!(err < 0.35, "nonlinear index direction missed: err_B = {err}");
    }

    #[test]
    fn split_discipline_and_determinism() {
        let samples = synthetic_linear_samples(2000, 2, 8);
        let cfg = MplsConfig { split_seed: 42, ..Default::default() };
        let a = mpls(&samples, 1, &cfg).unwrap();
        let b = mpls(&samples, 1, &cfg).unwrap();
        assert_eq!(a.beta_hat.as_slice(), b.beta_hat.as_slice());
        assert_eq!(a.a_hat.as_slice(), b.a_hat.as_slice());
        let c = mpls(&samples, 1, &MplsConfig { split_seed: 43, ..Default::default() }).unwrap();
        assert_ne!(a.a_hat.as_slice(), c.a_hat.as_slice());
    }

    #[test]
    fn err_b_examples() {
        let e1 = ReductionMap::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), Provenance::Oracle)
            .unwrap();
        let e2 = ReductionMap::new(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), Provenance::Oracle)
            .unwrap();
        assert_relative_eq!(err_b(&e1, &e1).unwrap(), 0.0);
        assert_relative_eq!(err_b(&e1, &e2).unwrap(), 1.0, epsilon = 1e-12);

        // invariance under orthogonal remixing of rows
        let b = ReductionMap::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Provenance::Oracle,
        )
        .unwrap();
        let angle = 0.7f64;
        let (c, s) = (angle.cos(), angle.sin());
        let mixed = ReductionMap::new(
            DMatrix::from_row_slice(2, 3, &[c, s, 0.0, -s, c, 0.0]),
            Provenance::Oracle,
        )
        .unwrap();
        assert!(err_b(&b, &mixed).unwrap() <= 1e-12);

        let wrong_shape =
            ReductionMap::new(DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]), Provenance::Oracle)
                .unwrap();
        assert!(err_b(&e1, &wrong_shape).is_err());
    }

    #[test]
    fn q_too_small_is_rejected() {
        let samples = synthetic_linear_samples(20, 2, 9);
        assert!(matches!(
            mpls(&samples, 1, &MplsConfig::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn scale_equivariance_of_selection() {
        let mut samples = synthetic_linear_samples(3000, 2, 10);
        let dim = samples.dim;
        for q in 0..samples.len() {
            let y0 = samples.ys[q * dim + 4];
            samples.zs[q] = (3.0 * y0).sin();
        }
        let out = mpls(&samples, 1, &MplsConfig::default()).unwrap();
        let red1 = assemble_reduction(&samples, &out, 1).unwrap();
        let mut scaled = samples.clone();
        for z in scaled.zs.iter_mut() {
            *z *= 7.5;
        }
        let out2 = mpls(&scaled, 1, &MplsConfig::default()).unwrap();
        let red2 = assemble_reduction(&scaled, &out2, 1).unwrap();
        assert_eq!(red1.provenance, red2.provenance);
    }
}
