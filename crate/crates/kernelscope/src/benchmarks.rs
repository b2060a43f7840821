//! Ground-truth benchmark systems: opinion dynamics (OD), power-law dynamics
//! (PL), and power-law dynamics with directional correction (PLwDC), each as
//! a closed-form kernel together with its factorization through the quadratic
//! feature map.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{InteractionKernel, SystemSpec, UniformBox};
use crate::error::{Error, Result};
use crate::features::feature_dim;
use crate::mpls::{Provenance, ReductionMap};

const TWO_SQRT3: f64 = 3.464_101_615_137_754_6; // 2 * sqrt(3)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Od,
    Pl,
    Plwdc,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [SystemKind::Od, SystemKind::Pl, SystemKind::Plwdc];

    pub fn label(&self) -> &'static str {
        match self {
            SystemKind::Od => "OD",
            SystemKind::Pl => "PL",
            SystemKind::Plwdc => "PLwDC",
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            SystemKind::Od => "od",
            SystemKind::Pl => "pl",
            SystemKind::Plwdc => "plwdc",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "od" => Ok(SystemKind::Od),
            "pl" => Ok(SystemKind::Pl),
            "plwdc" => Ok(SystemKind::Plwdc),
            other => Err(Error::Config(format!(
                "unknown system '{other}' (expected od, pl, or plwdc)"
            ))),
        }
    }
}

/// Reduced kernel: a scalar function of the d'-dimensional reduced variables.
pub trait ReducedKernel: Send + Sync {
    fn eval(&self, xi: &[f64]) -> f64;
}

impl<F> ReducedKernel for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, xi: &[f64]) -> f64 {
        self(xi)
    }
}

/// Shared experiment parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CommonParams {
    pub m: usize,
    pub m_transfer: usize,
    pub n_agents: usize,
    pub n_transfer: usize,
    pub l_times: usize,
    pub t_horizon: f64,
    pub d: usize,
}

impl Default for CommonParams {
    fn default() -> Self {
        Self {
            m: 50_000,
            m_transfer: 500,
            n_agents: 2,
            n_transfer: 20,
            l_times: 5,
            t_horizon: 1.0,
            d: 2,
        }
    }
}

/// A fully specified ground-truth system.
pub struct BenchmarkSpec {
    pub kind: SystemKind,
    pub dprime: usize,
    pub true_b: ReductionMap,
    pub true_phi: Arc<dyn ReducedKernel>,
    /// Closed-form pair kernel, implemented independently of the
    /// feature-map factorization.
    pub kernel: Arc<dyn InteractionKernel>,
    pub mu0: UniformBox,
    pub v0: Option<Vec<f64>>,
    pub common: CommonParams,
}

impl BenchmarkSpec {
    pub fn by_kind(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Od => build_od(),
            SystemKind::Pl => build_pl(),
            SystemKind::Plwdc => build_plwdc(vec![1.0, 0.0]).expect("default v0 is unit"),
        }
    }

    /// System spec for simulating this benchmark with `n_agents` agents.
    pub fn system_spec(&self, n_agents: usize, seed: u64, substeps: usize) -> SystemSpec {
        SystemSpec {
            n_agents,
            d: self.common.d,
            t_horizon: self.common.t_horizon,
            l_times: self.common.l_times,
            kernel: Arc::clone(&self.kernel),
            init_box: self.mu0.clone(),
            rng_seed: seed,
            substeps,
            name: self.kind.slug().to_string(),
        }
    }

    /// True kernel evaluated through the factorization `phi(B y(x_i, x_j))`.
    pub fn composed_kernel(&self, xi: &[f64], xj: &[f64]) -> f64 {
        let mut y = vec![0.0; feature_dim(self.common.d)];
        crate::features::feature_map_into(xi, xj, &mut y);
        let mut proj = vec![0.0; self.dprime];
        self.true_b.project(&y, &mut proj);
        self.true_phi.eval(&proj)
    }
}

/// Row of the reduction map expressing `||x_i - x_{i'}||^2 / (2 sqrt 3)`
/// in the quadratic feature layout for d = 2 (unit norm by construction).
fn squared_distance_row() -> Vec<f64> {
    let d = 2;
    let s = 1.0 / TWO_SQRT3;
    let mut row = vec![0.0; feature_dim(d)];
    // pure squares of x_i: positions (0,0) and (1,1) in the lexicographic block
    row[4] = s; // (x_i)_1^2
    row[6] = s; // (x_i)_2^2
    row[7] = s; // (x_{i'})_1^2
    row[9] = s; // (x_{i'})_2^2
    row[10] = -2.0 * s; // (x_i)_1 (x_{i'})_1
    row[13] = -2.0 * s; // (x_i)_2 (x_{i'})_2
    row
}

/// Linear row expressing `<x_{i'} - x_i, v0> / sqrt(2)` (unit norm for unit v0).
fn directional_row(v0: &[f64]) -> Vec<f64> {
    let d = v0.len();
    let s = 1.0 / 2f64.sqrt();
    let mut row = vec![0.0; feature_dim(d)];
    for k in 0..d {
        row[k] = -v0[k] * s;
        row[d + k] = v0[k] * s;
    }
    row
}

fn reduction_from_rows(rows: Vec<Vec<f64>>) -> ReductionMap {
    let dprime = rows.len();
    let dim = rows[0].len();
    let mat = DMatrix::from_fn(dprime, dim, |r, c| rows[r][c]);
    ReductionMap::new(mat, Provenance::Oracle).expect("oracle rows are orthonormal")
}

const OD_LOW: f64 = 1.0 / (4.0 * 1.732_050_807_568_877_2); // 1 / (4 sqrt 3)
const OD_HIGH: f64 = 1.0 / TWO_SQRT3; // 1 / (2 sqrt 3)

/// Opinion dynamics: compactly supported piecewise-constant kernel of the
/// squared pairwise distance, mu0 uniform on [0, 5]^2.
pub fn build_od() -> BenchmarkSpec {
    let phi = |xi: &[f64]| {
        let v = xi[0];
        if (0.0..OD_LOW).contains(&v) {
            0.1
        } else if (OD_LOW..OD_HIGH).contains(&v) {
            1.0
        } else {
            0.0
        }
    };
    let kernel = |xi: &[f64], xj: &[f64]| {
        let mut r2 = 0.0;
        for k in 0..xi.len() {
            let diff = xj[k] - xi[k];
            r2 += diff * diff;
        }
        if r2 < 0.5 {
            0.1
        } else if r2 < 1.0 {
            1.0
        } else {
            0.0
        }
    };
    BenchmarkSpec {
        kind: SystemKind::Od,
        dprime: 1,
        true_b: reduction_from_rows(vec![squared_distance_row()]),
        true_phi: Arc::new(phi),
        kernel: Arc::new(kernel),
        mu0: UniformBox::cube(2, 0.0, 5.0).expect("static bounds"),
        v0: None,
        common: CommonParams::default(),
    }
}

/// Power-law dynamics: `Phi = ||x_i - x_{i'}|| - 1`, mu0 uniform on [0, 1]^2.
pub fn build_pl() -> BenchmarkSpec {
    let phi = |xi: &[f64]| (TWO_SQRT3 * xi[0]).max(0.0).sqrt() - 1.0;
    let kernel = |xi: &[f64], xj: &[f64]| {
        let mut r2 = 0.0;
        for k in 0..xi.len() {
            let diff = xj[k] - xi[k];
            r2 += diff * diff;
        }
        r2.sqrt() - 1.0
    };
    BenchmarkSpec {
        kind: SystemKind::Pl,
        dprime: 1,
        true_b: reduction_from_rows(vec![squared_distance_row()]),
        true_phi: Arc::new(phi),
        kernel: Arc::new(kernel),
        mu0: UniformBox::cube(2, 0.0, 1.0).expect("static bounds"),
        v0: None,
        common: CommonParams::default(),
    }
}

/// Power-law dynamics with a directional correction steering agents along
/// the unit vector `v0`; two reduced variables.
pub fn build_plwdc(v0: Vec<f64>) -> Result<BenchmarkSpec> {
    if v0.len() != 2 {
        return Err(Error::Config("v0 must be a 2-vector".into()));
    }
    let norm = (v0[0] * v0[0] + v0[1] * v0[1]).sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("v0 must be a unit vector, norm = {norm}")));
    }
    let phi = |xi: &[f64]| {
        let first = (TWO_SQRT3 * xi[0]).max(0.0).sqrt() - 1.0;
        first * ((2.0 / std::f64::consts::PI) * (2f64.sqrt() * xi[1]).atan()).exp()
    };
    let v0k = v0.clone();
    let kernel = move |xi: &[f64], xj: &[f64]| {
        let mut r2 = 0.0;
        let mut along = 0.0;
        for k in 0..xi.len() {
            let diff = xj[k] - xi[k];
            r2 += diff * diff;
            along += diff * v0k[k];
        }
        (r2.sqrt() - 1.0) * ((2.0 / std::f64::consts::PI) * along.atan()).exp()
    };
    Ok(BenchmarkSpec {
        kind: SystemKind::Plwdc,
        dprime: 2,
        true_b: reduction_from_rows(vec![squared_distance_row(), directional_row(&v0)]),
        true_phi: Arc::new(phi),
        kernel: Arc::new(kernel),
        mu0: UniformBox::cube(2, 0.0, 1.0).expect("static bounds"),
        v0: Some(v0),
        common: CommonParams::default(),
    })
}
