//! Small dense matrix helpers shared by every module.
//!
//! All matrices are `n x n` with `n` in {1, 2, 3}; nothing here is tuned for
//! large sizes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn rotation2(theta: f64) -> Mat {
    let (s, c) = theta.sin_cos();
    Mat::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Rotation angle of a 2x2 rotation matrix.
pub fn angle2(r: &Mat) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} has non-finite entries")))
    }
}

pub fn det(m: &Mat) -> f64 {
    match m.nrows() {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => m.determinant(),
    }
}

struct Svd {
    u: Mat,
    sigma: Vec<f64>,
    v_t: Mat,
}

fn svd(m: &Mat) -> Svd {
    let s = m.clone().svd(true, true);
    Svd {
        u: s.u.expect("svd requested u"),
        sigma: s.singular_values.iter().copied().collect(),
        v_t: s.v_t.expect("svd requested v_t"),
    }
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Singular values with the smallest one negated when `det m < 0`.
pub fn signed_singular_values(m: &Mat) -> Vec<f64> {
    if m.nrows() == 1 {
        return vec![m[(0, 0)]];
    }
    let mut sigma = svd(m).sigma;
    if det(m) < 0.0 {
        let k = argmin(&sigma);
        sigma[k] = -sigma[k];
    }
    sigma
}

/// Nearest rotation in Frobenius norm (polar projection onto SO(n)).
pub fn nearest_rotation(m: &Mat) -> Mat {
    let n = m.nrows();
    if n == 1 {
        return Mat::identity(1, 1);
    }
    let Svd { u, sigma, v_t } = svd(m);
    let mut d = Mat::identity(n, n);
    if det(&(&u * &v_t)) < 0.0 {
        let k = argmin(&sigma);
        d[(k, k)] = -1.0;
    }
    &u * d * v_t
}

/// `min_R |f - R|_F` over rotations.
pub fn dist_to_son(f: &Mat) -> f64 {
    signed_singular_values(f)
        .iter()
        .map(|s| (s - 1.0) * (s - 1.0))
        .sum::<f64>()
        .sqrt()
}

/// Best rotation `R` minimising `|f - R u|_F` and the attained distance.
pub fn procrustes(f: &Mat, u: &Mat) -> (Mat, f64) {
    let r = nearest_rotation(&(f * u.transpose()));
    let dist = (f - &r * u).norm();
    (r, dist)
}

pub fn is_rotation(r: &Mat, tol: f64) -> bool {
    let n = r.nrows();
    if r.ncols() != n {
        return false;
    }
    let orth = (r.transpose() * r - Mat::identity(n, n)).amax();
    orth <= tol && (det(r) - 1.0).abs() <= tol
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// `a ⊗ b` as the matrix `a bᵀ`.
pub fn outer(a: &Vector, b: &Vector) -> Mat {
    a * b.transpose()
}

/// Largest singular value.
pub fn op_norm(m: &Mat) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    svd(m).sigma.iter().copied().fold(0.0, f64::max)
}

/// Golden-section minimisation of a unimodal function on `[a, b]`.
pub fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iters = 0;
    while (b - a).abs() > tol && iters < 200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        iters += 1;
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Row-major flattening used by every serialized format.
pub fn to_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(n: usize, data: &[f64]) -> Result<Mat> {
    if data.len() != n * n {
        return Err(Error::Input(format!(
            "expected {} entries for a {n}x{n} matrix, got {}",
            n * n,
            data.len()
        )));
    }
    Ok(Mat::from_row_slice(n, n, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rotation_of_rotation_is_itself() {
        let r = rotation2(0.7);
        assert!((nearest_rotation(&r) - &r).amax() < 1e-14);
    }

    #[test]
    fn reflection_is_projected_into_son() {
        let f = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let r = nearest_rotation(&f);
        assert!(is_rotation(&r, 1e-12));
        // diag(1,-1) has signed singular values (1, -1): distance 2.
        assert!((dist_to_son(&f) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, fx) = golden_min(|x| (x - 0.3) * (x - 0.3), -1.0, 2.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8);
        assert!(fx < 1e-15);
    }
}
