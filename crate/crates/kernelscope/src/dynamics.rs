//! Simulation of first-order interacting-agent systems
//! `dx_i/dt = (1/N) sum_{i'} Phi(x_i, x_{i'}) (x_{i'} - x_i)`
//! with exact velocities recorded at equi-spaced observation times.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Pairwise interaction kernel `Phi(x_i, x_{i'})`.
///
/// Never evaluated at coincident arguments by the integrator: the diagonal
/// term of the sum is skipped since its difference factor vanishes.
pub trait InteractionKernel: Send + Sync {
    fn eval(&self, xi: &[f64], xj: &[f64]) -> f64;
}

impl<F> InteractionKernel for F
where
    F: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, xi: &[f64], xj: &[f64]) -> f64 {
        self(xi, xj)
    }
}

/// Per-agent uniform initial distribution on an axis-aligned box.
#[derive(Debug, Clone)]
pub struct UniformBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl UniformBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Config("box bounds have mismatched lengths".into()));
        }
        for (l, h) in lo.iter().zip(&hi) {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::Config("box bounds must be finite".into()));
            }
            if l > h {
                return Err(Error::Config(format!("box lower bound {l} exceeds upper {h}")));
            }
        }
        Ok(Self { lo, hi })
    }

    /// Same bounds in every coordinate.
    pub fn cube(d: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; d], vec![hi; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn sample_coord(&self, k: usize, rng: &mut impl Rng) -> f64 {
        if self.lo[k] == self.hi[k] {
            self.lo[k]
        } else {
            rng.random_range(self.lo[k]..self.hi[k])
        }
    }
}

/// Number of RK4 substeps between consecutive observation times.
pub const DEFAULT_SUBSTEPS: usize = 200;

/// Full description of a simulated system.
#[derive(Clone)]
pub struct SystemSpec {
    pub n_agents: usize,
    pub d: usize,
    pub t_horizon: f64,
    pub l_times: usize,
    pub kernel: Arc<dyn InteractionKernel>,
    pub init_box: UniformBox,
    pub rng_seed: u64,
    pub substeps: usize,
    pub name: String,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::Config("need at least 2 agents".into()));
        }
        if self.d < 1 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if self.l_times < 2 {
            return Err(Error::Config("need at least 2 observation times".into()));
        }
        if !(self.t_horizon > 0.0) {
            return Err(Error::Config("time horizon must be positive".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substep count must be positive".into()));
        }
        if self.init_box.dim() != self.d {
            return Err(Error::Config("initial box dimension differs from d".into()));
        }
        Ok(())
    }

    /// Observation times `t_l = (l-1) T / (L-1)`.
    pub fn times(&self) -> Vec<f64> {
        let dt = self.t_horizon / (self.l_times - 1) as f64;
        (0..self.l_times).map(|l| l as f64 * dt).collect()
    }

    pub fn state_len(&self) -> usize {
        self.n_agents * self.d
    }
}

/// Observed states and exact velocities for M trajectories.
///
/// Flat row-major layout `[m][l][agent][coordinate]`.
#[derive(Debug, Clone)]
pub struct TrajectorySet {
    pub m: usize,
    pub n_agents: usize,
    pub l_times: usize,
    pub d: usize,
    pub t_horizon: f64,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub velocities: Vec<f64>,
    pub system: String,
    pub seed: u64,
    pub substeps: usize,
}

impl TrajectorySet {
    fn frame_len(&self) -> usize {
        self.n_agents * self.d
    }

    pub fn state(&self, m: usize, l: usize) -> &[f64] {
        let f = self.frame_len();
        let off = (m * self.l_times + l) * f;
        &self.states[off..off + f]
    }

    pub fn velocity(&self, m: usize, l: usize) -> &[f64] {
        let f = self.frame_len();
        let off = (m * self.l_times + l) * f;
        &self.velocities[off..off + f]
    }

    pub fn agent_state(&self, m: usize, l: usize, i: usize) -> &[f64] {
        let s = self.state(m, l);
        &s[i * self.d..(i + 1) * self.d]
    }

    pub fn agent_velocity(&self, m: usize, l: usize, i: usize) -> &[f64] {
        let v = self.velocity(m, l);
        &v[i * self.d..(i + 1) * self.d]
    }
}

/// Draws `m` initial conditions, one per-trajectory RNG stream, each agent's
/// coordinates i.i.d. uniform on the configured box.
pub fn sample_initial_conditions(spec: &SystemSpec, m: usize) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    Ok((0..m).map(|idx| sample_one_ic(spec, idx)).collect())
}

fn sample_one_ic(spec: &SystemSpec, trajectory: usize) -> Vec<f64> {
    let mut rng = stream_rng(spec.rng_seed, trajectory as u64);
    let mut x0 = Vec::with_capacity(spec.state_len());
    for _agent in 0..spec.n_agents {
        for k in 0..spec.d {
            x0.push(spec.init_box.sample_coord(k, &mut rng));
        }
    }
    x0
}

/// Right-hand side of the interaction ODE; the `i' = i` term is skipped.
pub fn rhs(spec: &SystemSpec, state: &[f64], out: &mut [f64]) -> Result<()> {
    let n = spec.n_agents;
    let d = spec.d;
    debug_assert_eq!(state.len(), n * d);
    debug_assert_eq!(out.len(), n * d);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let xi = &state[i * d..(i + 1) * d];
        let acc = &mut out[i * d..(i + 1) * d];
        acc.fill(0.0);
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &state[j * d..(j + 1) * d];
            let phi = spec.kernel.eval(xi, xj);
            if !phi.is_finite() {
                return Err(Error::Numeric(format!(
                    "kernel returned {phi} for agent pair ({i}, {j})"
                )));
            }
            for k in 0..d {
                acc[k] += phi * (xj[k] - xi[k]);
            }
        }
        for k in 0..d {
            acc[k] *= inv_n;
        }
    }
    Ok(())
}

/// Convenience wrapper returning a fresh vector.
pub fn rhs_vec(spec: &SystemSpec, state: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; state.len()];
    rhs(spec, state, &mut out)?;
    Ok(out)
}

/// Integrates one trajectory with fixed-step classical RK4, recording state
/// and exact velocity at each observation time.
pub fn simulate(spec: &SystemSpec, x0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    if x0.len() != spec.state_len() {
        return Err(Error::Usage(format!(
            "initial state length {} does not match N*d = {}",
            x0.len(),
            spec.state_len()
        )));
    }
    let f = spec.state_len();
    let l = spec.l_times;
    let h = spec.t_horizon / ((l - 1) * spec.substeps) as f64;

    let mut states = vec![0.0; l * f];
    let mut velocities = vec![0.0; l * f];
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; f];
    let mut k2 = vec![0.0; f];
    let mut k3 = vec![0.0; f];
    let mut k4 = vec![0.0; f];
    let mut tmp = vec![0.0; f];

    let mut t = 0.0;
    for l_idx in 0..l {
        states[l_idx * f..(l_idx + 1) * f].copy_from_slice(&x);
        rhs(spec, &x, &mut k1)?;
        velocities[l_idx * f..(l_idx + 1) * f].copy_from_slice(&k1);
        if l_idx + 1 == l {
            break;
        }
        for _ in 0..spec.substeps {
            rhs(spec, &x, &mut k1)?;
            for i in 0..f {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            rhs(spec, &tmp, &mut k2)?;
            for i in 0..f {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            rhs(spec, &tmp, &mut k3)?;
            for i in 0..f {
                tmp[i] = x[i] + h * k3[i];
            }
            rhs(spec, &tmp, &mut k4)?;
            for i in 0..f {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t += h;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { trajectory: 0, time: t });
            }
        }
    }
    Ok((states, velocities))
}

const GEN_CHUNK: usize = 64;

/// Simulates `m` independent trajectories from i.i.d. initial conditions.
///
/// Trajectories are generated in parallel over fixed-size chunks and written
/// back in index order, so the result does not depend on scheduling.
pub fn generate_dataset(spec: &SystemSpec, m: usize) -> Result<TrajectorySet> {
    spec.validate()?;
    let f = spec.state_len();
    let frame = spec.l_times * f;
    let n_chunks = m.div_ceil(GEN_CHUNK);

    let chunks: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * GEN_CHUNK;
            let end = ((c + 1) * GEN_CHUNK).min(m);
            let mut states = Vec::with_capacity((end - start) * frame);
            let mut velocities = Vec::with_capacity((end - start) * frame);
            for idx in start..end {
                let x0 = sample_one_ic(spec, idx);
                let (s, v) = simulate(spec, &x0).map_err(|e| match e {
                    Error::Divergence { time, .. } => Error::Divergence { trajectory: idx, time },
                    other => other,
                })?;
                states.extend_from_slice(&s);
                velocities.extend_from_slice(&v);
            }
            Ok((states, velocities))
        })
        .collect();

    let mut states = Vec::with_capacity(m * frame);
    let mut velocities = Vec::with_capacity(m * frame);
    for chunk in chunks {
        let (s, v) = chunk?;
        states.extend_from_slice(&s);
        velocities.extend_from_slice(&v);
    }

    Ok(TrajectorySet {
        m,
        n_agents: spec.n_agents,
        l_times: spec.l_times,
        d: spec.d,
        t_horizon: spec.t_horizon,
        times: spec.times(),
        states,
        velocities,
        system: spec.name.clone(),
        seed: spec.rng_seed,
        substeps: spec.substeps,
    })
}
