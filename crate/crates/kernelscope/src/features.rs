//! Quadratic feature map for state pairs and the two-agent reduction of the
//! kernel inverse problem to plain regression samples.

use rayon::prelude::*;

use crate::dynamics::TrajectorySet;
use crate::error::{Error, Result};

/// Feature dimension `D = 2d^2 + 3d`.
pub fn feature_dim(d: usize) -> usize {
    2 * d * d + 3 * d
}

/// Pairs closer than this (state units) are skipped during extraction; the
/// regression target divides by the squared pair distance.
pub const PAIR_TOLERANCE: f64 = 1e-8;

/// Writes the feature vector of the ordered pair `(x_i, x_{i'})` into `out`.
///
/// Fixed layout: `[x_i | x_{i'} | upper-triangular quadratics of x_i
/// (lexicographic j <= j') | same for x_{i'} | full cross products
/// (x_i)_j (x_{i'})_{j'} (row-major)]`.
pub fn feature_map_into(xi: &[f64], xj: &[f64], out: &mut [f64]) {
    let d = xi.len();
    debug_assert_eq!(xj.len(), d);
    debug_assert_eq!(out.len(), feature_dim(d));
    let mut p = 0;
    out[p..p + d].copy_from_slice(xi);
    p += d;
    out[p..p + d].copy_from_slice(xj);
    p += d;
    for j in 0..d {
        for jp in j..d {
            out[p] = xi[j] * xi[jp];
            p += 1;
        }
    }
    for j in 0..d {
        for jp in j..d {
            out[p] = xj[j] * xj[jp];
            p += 1;
        }
    }
    for j in 0..d {
        for jp in 0..d {
            out[p] = xi[j] * xj[jp];
            p += 1;
        }
    }
    debug_assert_eq!(p, out.len());
}

pub fn feature_map(xi: &[f64], xj: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; feature_dim(xi.len())];
    feature_map_into(xi, xj, &mut out);
    out
}

/// Index permutation `perm` with `y(x_j, x_i)[k] = y(x_i, x_j)[perm[k]]`:
/// the linear and pure-quadratic blocks swap and the cross block transposes.
pub fn swap_permutation(d: usize) -> Vec<usize> {
    let q = d * (d + 1) / 2;
    let dim = feature_dim(d);
    let mut perm = Vec::with_capacity(dim);
    perm.extend(d..2 * d);
    perm.extend(0..d);
    perm.extend(2 * d + q..2 * d + 2 * q);
    perm.extend(2 * d..2 * d + q);
    let cross = 2 * d + 2 * q;
    for j in 0..d {
        for jp in 0..d {
            perm.push(cross + jp * d + j);
        }
    }
    perm
}

/// Regression samples `(y_q, z_q)` with the pair distance kept as the
/// evaluation weight, stored as flat arrays.
#[derive(Debug, Clone)]
pub struct RegressionSamples {
    /// State dimension the features were built from.
    pub d: usize,
    /// Feature dimension D.
    pub dim: usize,
    /// Flat Q x D feature rows.
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
    /// Pair distances `||x_i - x_{i'}||`.
    pub weights: Vec<f64>,
}

impl RegressionSamples {
    pub fn new(d: usize) -> Self {
        Self { d, dim: feature_dim(d), ys: Vec::new(), zs: Vec::new(), weights: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.zs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zs.is_empty()
    }

    pub fn y(&self, q: usize) -> &[f64] {
        &self.ys[q * self.dim..(q + 1) * self.dim]
    }

    pub fn push(&mut self, y: &[f64], z: f64, weight: f64) {
        debug_assert_eq!(y.len(), self.dim);
        self.ys.extend_from_slice(y);
        self.zs.push(z);
        self.weights.push(weight);
    }
}

const EXTRACT_CHUNK: usize = 1024;

/// Converts a two-agent trajectory set into regression samples: for each
/// observation and each ordered pair, `z = 2 <xdot_i, x_{i'} - x_i> /
/// ||x_{i'} - x_i||^2` equals the kernel value at that pair.
///
/// Near-coincident pairs (distance <= `PAIR_TOLERANCE`) are skipped, so the
/// output holds at most `2 L M` samples.
pub fn extract_regression_samples(data: &TrajectorySet) -> Result<RegressionSamples> {
    if data.n_agents != 2 {
        return Err(Error::Usage(format!(
            "regression extraction requires N = 2 agents, got {}",
            data.n_agents
        )));
    }
    let d = data.d;
    let dim = feature_dim(d);
    let n_chunks = data.m.div_ceil(EXTRACT_CHUNK);

    let chunks: Vec<Result<RegressionSamples>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * EXTRACT_CHUNK;
            let end = ((c + 1) * EXTRACT_CHUNK).min(data.m);
            let mut out = RegressionSamples::new(d);
            let mut y = vec![0.0; dim];
            for m in start..end {
                for l in 0..data.l_times {
                    for (i, ip) in [(0usize, 1usize), (1, 0)] {
                        let xi = data.agent_state(m, l, i);
                        let xip = data.agent_state(m, l, ip);
                        let vi = data.agent_velocity(m, l, i);
                        let mut dist2 = 0.0;
                        let mut dot = 0.0;
                        for k in 0..d {
                            let diff = xip[k] - xi[k];
                            dist2 += diff * diff;
                            dot += vi[k] * diff;
                        }
                        let dist = dist2.sqrt();
                        if dist <= PAIR_TOLERANCE {
                            continue;
                        }
                        let z = 2.0 * dot / dist2;
                        if !z.is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite regression target at trajectory {m}, time index {l}"
                            )));
                        }
                        feature_map_into(xi, xip, &mut y);
                        out.push(&y, z, dist);
                    }
                }
            }
            Ok(out)
        })
        .collect();

    let mut out = RegressionSamples::new(d);
    for chunk in chunks {
        let chunk = chunk?;
        out.ys.extend_from_slice(&chunk.ys);
        out.zs.extend_from_slice(&chunk.zs);
        out.weights.extend_from_slice(&chunk.weights);
    }
    Ok(out)
}
