//! Persistence: one self-describing container format for all artifact kinds.
//!
//! Layout: magic `KSCF`, format version (u32 LE), header length (u64 LE), a
//! JSON header naming the kind and its shape, then the payload as raw 64-bit
//! little-endian floats. Numeric payloads round-trip bit-exactly. The full
//! schema is documented in `docs/FORMATS.md`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::TrajectorySet;
use crate::error::{Error, Result};
use crate::features::RegressionSamples;
use crate::mpls::{Provenance, ReductionMap};
use crate::regression::{BasisFamily, HypothesisSpace, KernelModel};

const MAGIC: &[u8; 4] = b"KSCF";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    TrajectorySet {
        m: usize,
        n_agents: usize,
        l_times: usize,
        d: usize,
        t_horizon: f64,
        system: String,
        seed: u64,
        substeps: usize,
    },
    RegressionSamples {
        q: usize,
        d: usize,
        dim: usize,
    },
    ReductionMap {
        dprime: usize,
        dim: usize,
        provenance: String,
    },
    KernelModel {
        family: String,
        degree: usize,
        dprime: usize,
        dim: usize,
        basis_per_dim: Vec<usize>,
        cells_per_dim: Vec<usize>,
        n_total: usize,
        provenance: String,
    },
}

fn write_container(path: &Path, header: &Header, payload: &[&[f64]]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header_json =
            serde_json::to_vec(header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        let mut buf = Vec::with_capacity(8 * 1024);
        for block in payload {
            for chunk in block.chunks(1024) {
                buf.clear();
                for v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not a kernelscope container".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let header_len = u64::from_le_bytes(len) as usize;
    if header_len > 16 * 1024 * 1024 {
        return Err(Error::Format("header length implausibly large".into()));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    serde_json::from_slice(&header_bytes).map_err(|e| Error::Format(format!("header decode: {e}")))
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0f64; count];
    let mut buf = vec![0u8; 8 * 1024];
    let mut filled = 0usize;
    while filled < count {
        let want = ((count - filled) * 8).min(buf.len());
        r.read_exact(&mut buf[..want])?;
        for chunk in buf[..want].chunks_exact(8) {
            out[filled] = f64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes"));
            filled += 1;
        }
    }
    Ok(out)
}

pub fn write_trajectory_set(path: &Path, data: &TrajectorySet) -> Result<()> {
    let header = Header::TrajectorySet {
        m: data.m,
        n_agents: data.n_agents,
        l_times: data.l_times,
        d: data.d,
        t_horizon: data.t_horizon,
        system: data.system.clone(),
        seed: data.seed,
        substeps: data.substeps,
    };
    write_container(path, &header, &[&data.times, &data.states, &data.velocities])
}

pub fn read_trajectory_set(path: &Path) -> Result<TrajectorySet> {
    let mut r = BufReader::new(File::open(path)?);
    match read_header(&mut r)? {
        Header::TrajectorySet { m, n_agents, l_times, d, t_horizon, system, seed, substeps } => {
            let frames = m
                .checked_mul(l_times)
                .and_then(|v| v.checked_mul(n_agents))
                .and_then(|v| v.checked_mul(d))
                .ok_or_else(|| Error::Format("trajectory shape overflows".into()))?;
            let times = read_f64s(&mut r, l_times)?;
            let states = read_f64s(&mut r, frames)?;
            let velocities = read_f64s(&mut r, frames)?;
            Ok(TrajectorySet {
                m,
                n_agents,
                l_times,
                d,
                t_horizon,
                times,
                states,
                velocities,
                system,
                seed,
                substeps,
            })
        }
        _ => Err(Error::Format(format!("{} does not hold a trajectory set", path.display()))),
    }
}

pub fn write_regression_samples(path: &Path, samples: &RegressionSamples) -> Result<()> {
    let header =
        Header::RegressionSamples { q: samples.len(), d: samples.d, dim: samples.dim };
    write_container(path, &header, &[&samples.ys, &samples.zs, &samples.weights])
}

pub fn read_regression_samples(path: &Path) -> Result<RegressionSamples> {
    let mut r = BufReader::new(File::open(path)?);
    match read_header(&mut r)? {
        Header::RegressionSamples { q, d, dim } => {
            if dim != crate::features::feature_dim(d) {
                return Err(Error::Format("feature dimension inconsistent with d".into()));
            }
            let ys = read_f64s(&mut r, q * dim)?;
            let zs = read_f64s(&mut r, q)?;
            let weights = read_f64s(&mut r, q)?;
            Ok(RegressionSamples { d, dim, ys, zs, weights })
        }
        _ => Err(Error::Format(format!("{} does not hold regression samples", path.display()))),
    }
}

pub fn write_reduction_map(path: &Path, map: &ReductionMap) -> Result<()> {
    let rows: Vec<f64> = row_major(&map.rows);
    let header = Header::ReductionMap {
        dprime: map.dprime(),
        dim: map.dim(),
        provenance: map.provenance.as_str().to_string(),
    };
    write_container(path, &header, &[&rows])
}

pub fn read_reduction_map(path: &Path) -> Result<ReductionMap> {
    let mut r = BufReader::new(File::open(path)?);
    match read_header(&mut r)? {
        Header::ReductionMap { dprime, dim, provenance } => {
            let rows = read_f64s(&mut r, dprime * dim)?;
            let provenance: Provenance = provenance.parse()?;
            ReductionMap::new(DMatrix::from_row_slice(dprime, dim, &rows), provenance)
        }
        _ => Err(Error::Format(format!("{} does not hold a reduction map", path.display()))),
    }
}

pub fn write_kernel_model(path: &Path, model: &KernelModel) -> Result<()> {
    let header = Header::KernelModel {
        family: model.space.family.as_str().to_string(),
        degree: model.space.degree,
        dprime: model.space.dprime(),
        dim: model.reduction.dim(),
        basis_per_dim: model.space.basis_per_dim.clone(),
        cells_per_dim: model.space.cells_per_dim.clone(),
        n_total: model.space.n_total,
        provenance: model.reduction.provenance.as_str().to_string(),
    };
    let support: Vec<f64> = model.space.support.iter().flat_map(|s| [s[0], s[1]]).collect();
    let rows = row_major(&model.reduction.rows);
    write_container(path, &header, &[&support, &model.coefficients, &rows])
}

pub fn read_kernel_model(path: &Path) -> Result<KernelModel> {
    let mut r = BufReader::new(File::open(path)?);
    match read_header(&mut r)? {
        Header::KernelModel {
            family,
            degree,
            dprime,
            dim,
            basis_per_dim,
            cells_per_dim,
            n_total,
            provenance,
        } => {
            let family: BasisFamily = family.parse()?;
            let support_flat = read_f64s(&mut r, 2 * dprime)?;
            let coefficients = read_f64s(&mut r, n_total)?;
            let rows = read_f64s(&mut r, dprime * dim)?;
            let support: Vec<[f64; 2]> =
                support_flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            if basis_per_dim.len() != dprime || cells_per_dim.len() != dprime {
                return Err(Error::Format("per-dimension counts inconsistent with d'".into()));
            }
            let n_check: usize = basis_per_dim.iter().product();
            if n_check != n_total {
                return Err(Error::Format("basis counts inconsistent with n_total".into()));
            }
            let space = HypothesisSpace {
                family,
                degree,
                support,
                basis_per_dim,
                cells_per_dim,
                n_total,
            };
            let provenance: Provenance = provenance.parse()?;
            let reduction =
                ReductionMap::new(DMatrix::from_row_slice(dprime, dim, &rows), provenance)?;
            Ok(KernelModel { space, coefficients, reduction })
        }
        _ => Err(Error::Format(format!("{} does not hold a kernel model", path.display()))),
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Writes a text file atomically (temp file, then rename).
pub fn write_text_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, SystemSpec, UniformBox};
    use crate::mpls::Provenance;
    use std::sync::Arc;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("create temp dir")
    }

    fn small_dataset(seed: u64) -> TrajectorySet {
        let spec = SystemSpec {
            n_agents: 2,
            d: 2,
            t_horizon: 1.0,
            l_times: 3,
            kernel: Arc::new(|xi: &[f64], xj: &[f64]| {
                let dx = xj[0] - xi[0];
                let dy = xj[1] - xi[1];
                (dx * dx + dy * dy).sqrt() - 1.0
            }),
            init_box: UniformBox::cube(2, 0.0, 1.0).unwrap(),
            rng_seed: seed,
            substeps: 5,
            name: "pl".into(),
        };
        generate_dataset(&spec, 6).unwrap()
    }

    #[test]
    fn trajectory_round_trip_is_bit_exact() {
        let dir = tmpdir();
        let path = dir.path().join("train.traj");
        let data = small_dataset(3);
        write_trajectory_set(&path, &data).unwrap();
        let back = read_trajectory_set(&path).unwrap();
        assert_eq!(back.m, data.m);
        assert_eq!(back.system, data.system);
        assert_eq!(back.t_horizon.to_bits(), data.t_horizon.to_bits());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.states), bits(&data.states));
        assert_eq!(bits(&back.velocities), bits(&data.velocities));
        assert_eq!(bits(&back.times), bits(&data.times));
    }

    #[test]
    fn samples_and_reduction_round_trip() {
        let dir = tmpdir();
        let data = small_dataset(4);
        let samples = crate::features::extract_regression_samples(&data).unwrap();
        let spath = dir.path().join("samples.reg");
        write_regression_samples(&spath, &samples).unwrap();
        let back = read_regression_samples(&spath).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.ys), bits(&samples.ys));
        assert_eq!(bits(&back.zs), bits(&samples.zs));
        assert_eq!(bits(&back.weights), bits(&samples.weights));

        let bench = crate::benchmarks::build_pl();
        let rpath = dir.path().join("b.rmap");
        write_reduction_map(&rpath, &bench.true_b).unwrap();
        let rback = read_reduction_map(&rpath).unwrap();
        assert_eq!(rback.provenance, Provenance::Oracle);
        for r in 0..rback.rows.nrows() {
            for c in 0..rback.rows.ncols() {
                assert_eq!(rback.rows[(r, c)].to_bits(), bench.true_b.rows[(r, c)].to_bits());
            }
        }
    }

    #[test]
    fn kernel_model_round_trip() {
        use crate::regression::{estimate_support, fit_kernel, BasisFamily, HypothesisSpace};
        let dir = tmpdir();
        let data = small_dataset(5);
        let bench = crate::benchmarks::build_pl();
        let samples = crate::features::extract_regression_samples(&data).unwrap();
        let support = estimate_support(&samples, &bench.true_b).unwrap();
        let space =
            HypothesisSpace::uniform(BasisFamily::ClampedBspline, 1, support, vec![5]).unwrap();
        let model = fit_kernel(&data, &bench.true_b, space).unwrap();
        let path = dir.path().join("model.kmod");
        write_kernel_model(&path, &model).unwrap();
        let back = read_kernel_model(&path).unwrap();
        assert_eq!(back.space.n_total, model.space.n_total);
        assert_eq!(back.space.family, model.space.family);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.coefficients), bits(&model.coefficients));
        for (a, b) in back.space.support.iter().zip(&model.space.support) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
        // identical evaluations
        let t = 0.5 * (model.space.support[0][0] + model.space.support[0][1]);
        assert_eq!(back.eval_reduced(&[t]).to_bits(), model.eval_reduced(&[t]).to_bits());
    }

    #[test]
    fn wrong_kind_and_corrupt_files_are_rejected() {
        let dir = tmpdir();
        let data = small_dataset(6);
        let path = dir.path().join("train.traj");
        write_trajectory_set(&path, &data).unwrap();
        assert!(matches!(read_reduction_map(&path), Err(Error::Format(_))));

        let garbage = dir.path().join("junk.bin");
        std::fs::write(&garbage, b"not a container").unwrap();
        assert!(read_trajectory_set(&garbage).is_err());

        // truncated payload
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.traj");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_trajectory_set(&cut).is_err());
    }

    #[test]
    fn checksums_are_stable() {
        let dir = tmpdir();
        let data = small_dataset(7);
        let p1 = dir.path().join("a.traj");
        let p2 = dir.path().join("b.traj");
        write_trajectory_set(&p1, &data).unwrap();
        write_trajectory_set(&p2, &data).unwrap();
        assert_eq!(sha256_file(&p1).unwrap(), sha256_file(&p2).unwrap());
    }
}
