//! Seeded random matrices for tests and examples.

use ndarray::{Array1, Array2};

use crate::linalg::{dagger, hermitize, trace, Op, C64};
use crate::rng::{complex_gaussian, stream};

pub fn random_op(n: usize, seed: u64) -> Op {
    let mut r = stream(seed);
    Array2::from_shape_fn((n, n), |_| complex_gaussian(&mut r))
}

pub fn random_real_symmetric(n: usize, seed: u64) -> Op {
    let mut r = stream(seed);
    let a = Array2::from_shape_fn((n, n), |_| C64::new(complex_gaussian(&mut r).re, 0.0));
    hermitize(&a)
}

pub fn random_hermitian(n: usize, seed: u64) -> Op {
    hermitize(&random_op(n, seed))
}

pub fn random_vector(n: usize, seed: u64) -> Array1<C64> {
    let mut r = stream(seed);
    let v: Array1<C64> = (0..n).map(|_| complex_gaussian(&mut r)).collect();
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    v.mapv(|z| z / norm)
}

/// Random full-rank density matrix G G† / tr(G G†).
pub fn random_state(n: usize, seed: u64) -> Op {
    let g = random_op(n, seed);
    let p = g.dot(&dagger(&g.view()));
    let t = trace(&p);
    p.mapv(|z| z / t)
}
