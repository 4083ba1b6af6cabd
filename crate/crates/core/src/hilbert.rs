//! Index arithmetic over `S ⊗ A ⊗ B`, embeddings and partial traces.
//!
//! Flat indices are S-major: `flat = (s·n_a + a)·n_b + b`. With this layout
//! the environment index `e = a·n_b + b` is contiguous for fixed `s`, so
//! tracing out the environment is a block sum.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_square, identity, kron, Op, C64, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeSpace {
    n_s: usize,
    n_a: usize,
    n_b: usize,
}

/// Which tensor factor an operator lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    S,
    A,
    B,
    SA,
    AB,
}

impl CompositeSpace {
    pub fn new(n_s: usize, n_a: usize, n_b: usize) -> Result<Self> {
        if n_s < 2 {
            return Err(Error::Validation(format!("n_s = {n_s}, need at least 2")));
        }
        if n_a == 0 || n_b == 0 {
            return Err(Error::Validation(format!(
                "factor dimensions must be positive (n_a = {n_a}, n_b = {n_b})"
            )));
        }
        n_s.checked_mul(n_a)
            .and_then(|x| x.checked_mul(n_b))
            .ok_or_else(|| Error::Validation("total dimension overflows".into()))?;
        Ok(Self { n_s, n_a, n_b })
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }
    pub fn n_a(&self) -> usize {
        self.n_a
    }
    pub fn n_b(&self) -> usize {
        self.n_b
    }
    pub fn n_env(&self) -> usize {
        self.n_a * self.n_b
    }
    pub fn n_tot(&self) -> usize {
        self.n_s * self.n_env()
    }

    pub fn factor_dim(&self, f: Factor) -> usize {
        match f {
            Factor::S => self.n_s,
            Factor::A => self.n_a,
            Factor::B => self.n_b,
            Factor::SA => self.n_s * self.n_a,
            Factor::AB => self.n_env(),
        }
    }

    pub fn flat_index(&self, s: usize, a: usize, b: usize) -> Result<usize> {
        check_range("s", s, self.n_s)?;
        check_range("a", a, self.n_a)?;
        check_range("b", b, self.n_b)?;
        Ok((s * self.n_a + a) * self.n_b + b)
    }

    pub fn unflatten(&self, idx: usize) -> Result<(usize, usize, usize)> {
        check_range("flat index", idx, self.n_tot())?;
        let b = idx % self.n_b;
        let rest = idx / self.n_b;
        Ok((rest / self.n_a, rest % self.n_a, b))
    }

    /// (ρ^S)_{ss'} = Σ_{a,b} ⟨s,a,b|ρ|s',a,b⟩.
    pub fn partial_trace_env(&self, rho: &Op) -> Result<Op> {
        self.expect_dim(rho, self.n_tot(), "total-space operator")?;
        let ne = self.n_env();
        Ok(Array2::from_shape_fn((self.n_s, self.n_s), |(s, t)| {
            (0..ne).map(|e| rho[[s * ne + e, t * ne + e]]).sum()
        }))
    }

    /// tr_E |ψ⟩⟨ψ| for a vector on the total space, without forming the
    /// projector: with Ψ the n_s × n_env reshape of ψ, the result is ΨΨ†.
    pub fn reduce_vector(&self, psi: &ArrayView1<C64>) -> Result<Op> {
        if psi.len() != self.n_tot() {
            return Err(Error::Shape(format!(
                "vector of length {} on a space of dimension {}",
                psi.len(),
                self.n_tot()
            )));
        }
        let ne = self.n_env();
        let mut out = Array2::zeros((self.n_s, self.n_s));
        accumulate_reduced(&mut out, psi, ne, 1.0);
        Ok(out)
    }

    /// (ρ^{AB}) = tr_S ρ; occasionally useful for environment checks.
    pub fn partial_trace_sys(&self, rho: &Op) -> Result<Op> {
        self.expect_dim(rho, self.n_tot(), "total-space operator")?;
        let ne = self.n_env();
        Ok(Array2::from_shape_fn((ne, ne), |(e, f)| {
            (0..self.n_s).map(|s| rho[[s * ne + e, s * ne + f]]).sum()
        }))
    }

    /// Promote an operator on one factor to the total space.
    pub fn embed(&self, op: &Op, factor: Factor) -> Result<Op> {
        self.expect_dim(op, self.factor_dim(factor), "factor operator")?;
        Ok(match factor {
            Factor::S => kron(op, &identity(self.n_env())),
            Factor::A => kron(&kron(&identity(self.n_s), op), &identity(self.n_b)),
            Factor::B => kron(&identity(self.n_s * self.n_a), op),
            Factor::SA => kron(op, &identity(self.n_b)),
            Factor::AB => kron(&identity(self.n_s), op),
        })
    }

    /// Promote an operator on A to the environment A ⊗ B.
    pub fn embed_a_in_env(&self, op: &Op) -> Result<Op> {
        self.expect_dim(op, self.n_a, "operator on A")?;
        Ok(kron(op, &identity(self.n_b)))
    }

    /// G^{ij}_{mm'} = Σ_q (C^i_{mq})* C^j_{m'q}, where C^i is the
    /// n_a × n_b reshape of the environment vector `vi`.
    pub fn g_coefficients(&self, vi: &ArrayView1<C64>, vj: &ArrayView1<C64>) -> Op {
        let (na, nb) = (self.n_a, self.n_b);
        Array2::from_shape_fn((na, na), |(m, m2)| {
            let mut acc = ZERO;
            for q in 0..nb {
                acc += vi[m * nb + q].conj() * vj[m2 * nb + q];
            }
            acc
        })
    }

    /// ⟨v_i| O ⊗ 1_B |v_j⟩ = Σ_{mm'} O_{mm'} G^{ij}_{mm'} for an operator O
    /// on A.
    pub fn a_matrix_element(&self, op_a: &Op, vi: &ArrayView1<C64>, vj: &ArrayView1<C64>) -> C64 {
        let g = self.g_coefficients(vi, vj);
        op_a.iter().zip(g.iter()).map(|(o, g)| o * g).sum()
    }

    fn expect_dim(&self, op: &Op, want: usize, what: &str) -> Result<()> {
        let n = check_square(op, what)?;
        if n != want {
            return Err(Error::Shape(format!("{what} has dimension {n}, expected {want}")));
        }
        Ok(())
    }
}

/// out += w · Ψ Ψ† with Ψ the row-major (len/ne) × ne reshape of psi.
pub(crate) fn accumulate_reduced(out: &mut Op, psi: &ArrayView1<C64>, ne: usize, w: f64) {
    let ns = out.nrows();
    for s in 0..ns {
        for t in s..ns {
            let mut acc = ZERO;
            for e in 0..ne {
                acc += psi[s * ne + e] * psi[t * ne + e].conj();
            }
            out[[s, t]] += acc * w;
            if t != s {
                out[[t, s]] += acc.conj() * w;
            }
        }
    }
}

fn check_range(what: &'static str, index: usize, bound: usize) -> Result<()> {
    if index >= bound {
        return Err(Error::Range { what, index, bound });
    }
    Ok(())
}
