//! Small dense linear-algebra helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-12;

/// Least-squares solve of `min ||A x - b||` for tall `A`.
///
/// Householder QR first; if `R` looks rank-deficient, retry with column
/// pivoting; as a last resort solve the ridged normal equations
/// (`1e-10 * trace` on the diagonal) and log the event.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (rows, cols) = a.shape();
    if rows < cols {
        return Err(Error::Usage(format!(
            "least-squares design is wide: {rows} rows < {cols} columns"
        )));
    }
    if b.len() != rows {
        return Err(Error::Usage(format!(
            "right-hand side length {} does not match design rows {rows}",
            b.len()
        )));
    }

    let qr = a.clone().qr();
    let r = qr.r();
    if diag_well_conditioned(&r) {
        let mut qtb = b.clone();
        qr.q_tr_mul(&mut qtb);
        let top = DVector::from_iterator(cols, qtb.iter().take(cols).copied());
        if let Some(x) = r.solve_upper_triangular(&top) {
            return Ok(x);
        }
    }

    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    if diag_well_conditioned(&r) {
        let mut qtb = b.clone();
        qr.q_tr_mul(&mut qtb);
        let top = DVector::from_iterator(cols, qtb.iter().take(cols).copied());
        if let Some(mut x) = r.solve_upper_triangular(&top) {
            qr.p().inv_permute_rows(&mut x);
            return Ok(x);
        }
    }

    log::warn!("least-squares design numerically singular; solving ridged normal equations");
    let gram = a.transpose() * a;
    let atb = a.transpose() * b;
    let (x, _) = solve_spd(&gram, &atb, 1e-10)?;
    Ok(x)
}

fn diag_well_conditioned(r: &DMatrix<f64>) -> bool {
    let n = r.ncols().min(r.nrows());
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for i in 0..n {
        let v = r[(i, i)].abs();
        max = max.max(v);
        min = min.min(v);
    }
    max > 0.0 && min > RANK_TOL * max
}

/// Solves a symmetric positive semi-definite system by Cholesky, adding
/// `ridge_scale * trace` to the diagonal if the factorization fails.
///
/// Returns the solution and whether the ridge was applied.
pub fn solve_spd(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    ridge_scale: f64,
) -> Result<(DVector<f64>, bool)> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok((chol.solve(b), false));
    }
    let trace = a.trace();
    let ridge = ridge_scale * if trace > 0.0 { trace } else { 1.0 };
    let mut ridged = a.clone();
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += ridge;
    }
    match ridged.cholesky() {
        Some(chol) => {
            log::warn!("normal matrix singular; applied ridge {ridge:.3e}");
            Ok((chol.solve(b), true))
        }
        None => Err(Error::Conditioning(
            "normal matrix not positive definite even after ridge".into(),
        )),
    }
}

/// Largest singular value.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().singular_values()[0]
}

/// Orthonormal basis of the hyperplane orthogonal to `v`, as matrix columns.
///
/// Built from the Householder reflection mapping `v` onto an axis, so the
/// columns are orthogonal to `v` and to each other at machine precision.
pub fn orthonormal_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let d = v.len();
    assert!(d >= 1, "complement of an empty vector");
    let w = v / v.norm();
    let alpha = if w[0] >= 0.0 { -1.0 } else { 1.0 };
    let mut u = w.clone();
    u[0] -= alpha;
    let uu = u.norm_squared();
    let mut h = DMatrix::<f64>::identity(d, d);
    if uu > 0.0 {
        h -= (&u * u.transpose()) * (2.0 / uu);
    }
    h.columns(1, d - 1).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn lstsq_recovers_exact_coefficients() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
        let x_true = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        let b = &a * &x_true;
        let x = lstsq(&a, &b).unwrap();
        assert_relative_eq!(x, x_true, epsilon = 1e-10);
    }

    #[test]
    fn lstsq_matches_normal_equations_on_noisy_system() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(60, 5, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(60, |_, _| rng.random_range(-1.0..1.0));
        let x = lstsq(&a, &b).unwrap();
        let gram = a.transpose() * &a;
        let x_ref = gram.cholesky().unwrap().solve(&(a.transpose() * &b));
        assert_relative_eq!(x, x_ref, epsilon = 1e-9);
    }

    #[test]
    fn lstsq_survives_duplicated_column() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut a = DMatrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let dup = a.column(1).into_owned();
        a.set_column(3, &dup);
        let b = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let x = lstsq(&a, &b).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
        // residual must still be orthogonal-ish to the column space
        let res = &b - &a * &x;
        let proj = a.transpose() * res;
        assert!(proj.norm() < 1e-6 * b.norm().max(1.0));
    }

    #[test]
    fn complement_is_orthonormal_and_orthogonal_to_v() {
        let v = DVector::from_vec(vec![0.3, -1.2, 0.0, 2.0, 0.7]);
        let c = orthonormal_complement(&v);
        assert_eq!(c.shape(), (5, 4));
        let gram = c.transpose() * &c;
        assert_relative_eq!(gram, DMatrix::identity(4, 4), epsilon = 1e-12);
        let vc = c.transpose() * &v;
        assert!(vc.norm() < 1e-12 * v.norm());
    }

    #[test]
    fn operator_norm_of_projection_difference() {
        // span(e1) vs span(e2) in R^2: projections differ maximally.
        let p1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert_relative_eq!(operator_norm(&(p1 - p2)), 1.0, epsilon = 1e-12);
    }
}
