//! Dense complex matrix helpers and the LAPACK-backed Hermitian eigensolver.
//!
//! Operators are row-major `Array2<C64>`. The eigensolver dispatches to the
//! real symmetric driver (`dsyevr`) whenever every imaginary part is exactly
//! zero, and to the complex Hermitian driver (`zheevr`) otherwise. Both use
//! the relatively robust representation algorithm, which needs only O(n)
//! workspace beyond the input and the eigenvector output.

extern crate openblas_src;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Dense square operator.
pub type Op = Array2<C64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(n: usize) -> Op {
    Array2::from_diag_elem(n, ONE)
}

pub fn diag(values: &[f64]) -> Op {
    let d: Array1<C64> = values.iter().map(|&v| c(v, 0.0)).collect();
    Array2::from_diag(&d)
}

pub fn from_real(a: &Array2<f64>) -> Op {
    a.mapv(|x| c(x, 0.0))
}

/// Conjugate transpose.
pub fn dagger(a: &ArrayView2<C64>) -> Op {
    a.t().mapv(|z| z.conj())
}

pub fn kron(a: &Op, b: &Op) -> Op {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for ((i, j), &x) in a.indexed_iter() {
        if x == ZERO {
            continue;
        }
        let mut blk = out.slice_mut(ndarray::s![i * br..(i + 1) * br, j * bc..(j + 1) * bc]);
        blk.zip_mut_with(b, |o, &y| *o = x * y);
    }
    out
}

pub fn trace(a: &Op) -> C64 {
    a.diag().sum()
}

pub fn max_abs(a: &ArrayView2<C64>) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn max_abs_diff(a: &Op, b: &Op) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

/// Largest elementwise deviation from Hermiticity, ‖A − A†‖_max.
pub fn hermitian_defect(a: &Op) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[[i, j]] - a[[j, i]].conj()).norm());
        }
    }
    worst
}

/// Symmetric part (A + A†)/2.
pub fn hermitize(a: &Op) -> Op {
    let ad = dagger(&a.view());
    (a + &ad).mapv(|z| z * 0.5)
}

pub fn commutator(a: &Op, b: &Op) -> Op {
    a.dot(b) - b.dot(a)
}

pub fn check_square(a: &Op, what: &str) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::Shape(format!("{what} is {r}x{c}, expected square")));
    }
    Ok(r)
}

/// ⟨u|A|v⟩ for column vectors.
pub fn sandwich(u: &ndarray::ArrayView1<C64>, a: &Op, v: &ndarray::ArrayView1<C64>) -> C64 {
    let av = a.dot(v);
    u.iter().zip(av.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Unitary change of basis U† A U.
pub fn transform(a: &Op, u: &Op) -> Op {
    dagger(&u.view()).dot(&a.dot(u))
}

/// Eigen-decomposition of a Hermitian matrix: ascending eigenvalues and the
/// matching eigenvectors as columns. No validation beyond squareness; the
/// caller checks Hermiticity.
pub fn eigh(a: &Op) -> Result<(Array1<f64>, Op)> {
    let n = check_square(a, "operator")?;
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    if a.iter().all(|z| z.im == 0.0) {
        // Lower triangle of a real symmetric matrix; row-major and column-major
        // layouts coincide up to transposition, which the driver ignores.
        let mut buf: Vec<f64> = a.iter().map(|z| z.re).collect();
        let (w, z) = dsyevr(n, &mut buf, true)?;
        drop(buf);
        let mut v = Array2::<C64>::zeros((n, n));
        for k in 0..n {
            let col = &z[k * n..(k + 1) * n];
            for i in 0..n {
                v[[i, k]] = c(col[i], 0.0);
            }
        }
        Ok((Array1::from(w), v))
    } else {
        let mut buf = column_major(a);
        let (w, z) = zheevr(n, &mut buf, true)?;
        drop(buf);
        let mut v = Array2::<C64>::zeros((n, n));
        for k in 0..n {
            let col = &z[k * n..(k + 1) * n];
            for i in 0..n {
                v[[i, k]] = col[i];
            }
        }
        Ok((Array1::from(w), v))
    }
}

/// Eigenvalues only.
pub fn eigvalsh(a: &Op) -> Result<Array1<f64>> {
    let n = check_square(a, "operator")?;
    if n == 0 {
        return Ok(Array1::zeros(0));
    }
    if a.iter().all(|z| z.im == 0.0) {
        let mut buf: Vec<f64> = a.iter().map(|z| z.re).collect();
        Ok(Array1::from(dsyevr(n, &mut buf, false)?.0))
    } else {
        let mut buf = column_major(a);
        Ok(Array1::from(zheevr(n, &mut buf, false)?.0))
    }
}

/// Eigenvalues and eigenvectors of a real symmetric matrix given as a
/// row-major slice. Used by paths that never leave the real field.
pub fn eigh_real(n: usize, a: &[f64]) -> Result<(Vec<f64>, Array2<f64>)> {
    if a.len() != n * n {
        return Err(Error::Shape(format!("buffer of {} for {n}x{n}", a.len())));
    }
    let mut buf = a.to_vec();
    let (w, z) = dsyevr(n, &mut buf, true)?;
    let v = Array2::from_shape_vec((n, n), z)
        .map_err(|e| Error::Shape(e.to_string()))?
        .reversed_axes();
    Ok((w, v.as_standard_layout().into_owned()))
}

fn column_major(a: &Op) -> Vec<C64> {
    let n = a.nrows();
    let mut buf = Vec::with_capacity(n * n);
    for col in a.axis_iter(Axis(1)) {
        buf.extend(col.iter().copied());
    }
    buf
}

fn dsyevr(n: usize, a: &mut [f64], vectors: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let nn = i32::try_from(n).map_err(|_| Error::Shape(format!("dimension {n} too large")))?;
    let jobz = if vectors { b'V' } else { b'N' } as std::ffi::c_char;
    let range = b'A' as std::ffi::c_char;
    let uplo = b'L' as std::ffi::c_char;
    let (vl, vu, il, iu, abstol) = (0.0, 0.0, 0, 0, 0.0);
    let mut m = 0;
    let mut w = vec![0.0; n];
    let mut z = if vectors { vec![0.0; n * n] } else { vec![0.0; 1] };
    let ldz = if vectors { nn } else { 1 };
    let mut isuppz = vec![0i32; 2 * n];
    let mut info = 0;
    let mut wq = [0.0f64];
    let mut iq = [0i32];
    // SAFETY: all buffers are sized per the LAPACK contract for dsyevr; the
    // first call is a workspace query.
    unsafe {
        lapack_sys::dsyevr_(
            &jobz, &range, &uplo, &nn, a.as_mut_ptr(), &nn, &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), z.as_mut_ptr(), &ldz, isuppz.as_mut_ptr(), wq.as_mut_ptr(), &-1,
            iq.as_mut_ptr(), &-1, &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numeric(format!("dsyevr workspace query failed: info={info}")));
    }
    let lwork = wq[0] as i32;
    let liwork = iq[0];
    let mut work = vec![0.0; lwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    unsafe {
        lapack_sys::dsyevr_(
            &jobz, &range, &uplo, &nn, a.as_mut_ptr(), &nn, &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), z.as_mut_ptr(), &ldz, isuppz.as_mut_ptr(), work.as_mut_ptr(), &lwork,
            iwork.as_mut_ptr(), &liwork, &mut info,
        );
    }
    if info != 0 || m as usize != n {
        return Err(Error::Numeric(format!(
            "dsyevr did not converge: info={info}, found {m} of {n}"
        )));
    }
    Ok((w, z))
}

fn zheevr(n: usize, a: &mut [C64], vectors: bool) -> Result<(Vec<f64>, Vec<C64>)> {
    let nn = i32::try_from(n).map_err(|_| Error::Shape(format!("dimension {n} too large")))?;
    let jobz = if vectors { b'V' } else { b'N' } as std::ffi::c_char;
    let range = b'A' as std::ffi::c_char;
    let uplo = b'L' as std::ffi::c_char;
    let (vl, vu, il, iu, abstol) = (0.0, 0.0, 0, 0, 0.0);
    let mut m = 0;
    let mut w = vec![0.0; n];
    let mut z = if vectors { vec![ZERO; n * n] } else { vec![ZERO; 1] };
    let ldz = if vectors { nn } else { 1 };
    let mut isuppz = vec![0i32; 2 * n];
    let mut info = 0;
    let mut wq = [lapack_sys::__BindgenComplex { re: 0.0, im: 0.0 }];
    let mut rq = [0.0f64];
    let mut iq = [0i32];
    let ap = a.as_mut_ptr() as *mut lapack_sys::__BindgenComplex<f64>;
    let zp = z.as_mut_ptr() as *mut lapack_sys::__BindgenComplex<f64>;
    // SAFETY: Complex64 is repr(C) {re, im}, layout-identical to the
    // bindgen complex type; buffers sized per the zheevr contract.
    unsafe {
        lapack_sys::zheevr_(
            &jobz, &range, &uplo, &nn, ap, &nn, &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), zp, &ldz, isuppz.as_mut_ptr(), wq.as_mut_ptr(), &-1,
            rq.as_mut_ptr(), &-1, iq.as_mut_ptr(), &-1, &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numeric(format!("zheevr workspace query failed: info={info}")));
    }
    let lwork = wq[0].re as i32;
    let lrwork = rq[0] as i32;
    let liwork = iq[0];
    let mut work = vec![lapack_sys::__BindgenComplex { re: 0.0, im: 0.0 }; lwork.max(1) as usize];
    let mut rwork = vec![0.0; lrwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    unsafe {
        lapack_sys::zheevr_(
            &jobz, &range, &uplo, &nn, ap, &nn, &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), zp, &ldz, isuppz.as_mut_ptr(), work.as_mut_ptr(), &lwork,
            rwork.as_mut_ptr(), &lrwork, iwork.as_mut_ptr(), &liwork, &mut info,
        );
    }
    if info != 0 || m as usize != n {
        return Err(Error::Numeric(format!(
            "zheevr did not converge: info={info}, found {m} of {n}"
        )));
    }
    Ok((w, z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_of_identities_is_identity() {
        let k = kron(&identity(2), &identity(3));
        assert_eq!(k, identity(6));
    }

    #[test]
    fn real_and_complex_drivers_agree_on_spectrum() {
        let a = Array2::from_shape_fn((5, 5), |(i, j)| {
            let x = ((i * 3 + j * 5) % 7) as f64 + ((i + j) % 3) as f64;
            c(x, 0.0)
        });
        let a = hermitize(&a);
        let (w_real, _) = eigh(&a).unwrap();
        // Nudge one element into the complex path while keeping the matrix
        // identical up to a tiny Hermitian imaginary perturbation.
        let mut b = a.clone();
        b[[0, 1]].im = 1e-300;
        b[[1, 0]].im = -1e-300;
        let (w_cplx, _) = eigh(&b).unwrap();
        for (x, y) in w_real.iter().zip(w_cplx.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn complex_hermitian_reconstructs() {
        let a = Array2::from_shape_fn((4, 4), |(i, j)| {
            if i == j {
                c(i as f64, 0.0)
            } else if i < j {
                c(0.3 * (i + j) as f64, 0.1 * (j - i) as f64)
            } else {
                c(0.3 * (i + j) as f64, -0.1 * (i - j) as f64)
            }
        });
        let (w, v) = eigh(&a).unwrap();
        let rec = v.dot(&diag(w.as_slice().unwrap())).dot(&dagger(&v.view()));
        assert!(max_abs_diff(&rec, &a) < 1e-12);
    }
}
