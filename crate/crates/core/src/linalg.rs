//! Small dense kernels used on hot Monte Carlo paths. Matrices are nalgebra
//! column-major, vectors plain slices.

use nalgebra::{DMatrix, DVector};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `out = m * x`.
#[inline]
pub fn matvec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = m.nrows();
    out[..n].iter_mut().for_each(|o| *o = 0.0);
    for (j, &xj) in x.iter().enumerate().take(m.ncols()) {
        if xj == 0.0 {
            continue;
        }
        let col = &m.as_slice()[j * n..(j + 1) * n];
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * xj;
        }
    }
}

/// `out += m * x`.
#[inline]
pub fn matvec_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = m.nrows();
    for (j, &xj) in x.iter().enumerate().take(m.ncols()) {
        if xj == 0.0 {
            continue;
        }
        let col = &m.as_slice()[j * n..(j + 1) * n];
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * xj;
        }
    }
}

/// `out = mᵀ * x`.
#[inline]
pub fn matvec_t(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = m.nrows();
    for (j, o) in out.iter_mut().enumerate().take(m.ncols()) {
        *o = dot(&m.as_slice()[j * n..(j + 1) * n], x);
    }
}

pub fn identity_minus_scaled(a: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::identity(n, n) - a * dt
}

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_variants_agree_with_nalgebra() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [1.0, -1.0, 2.0];
        let mut out = [0.0; 2];
        matvec(&m, &x, &mut out);
        let expect = &m * DVector::from_row_slice(&x);
        assert_eq!(out.as_slice(), expect.as_slice());
        matvec_add(&m, &x, &mut out);
        assert_eq!(out[0], 2.0 * expect[0]);
        let y = [1.0, 2.0];
        let mut t = [0.0; 3];
        matvec_t(&m, &y, &mut t);
        assert_eq!(t, [9.0, 12.0, 15.0]);
    }
}
