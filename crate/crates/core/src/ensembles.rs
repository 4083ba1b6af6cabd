//! Reduced density matrices: microcanonical, typical-vector and canonical
//! states, inverse-temperature fits and trace distance.

use ndarray::{Array1, Array2};
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::hilbert::{accumulate_reduced, CompositeSpace};
use crate::linalg::{self, c, dagger, hermitian_defect, hermitize, Op, C64, ZERO};
use crate::rng;
use crate::spectra::{DirectSumBasis, EnergyWindow, Spectrum};

const STATE_TOL: f64 = 1e-10;

pub const COMPUTATIONAL: &str = "computational";
pub const SYSTEM_EIGENBASIS: &str = "system eigenbasis";

/// A validated density matrix: Hermitian, unit trace, positive
/// semidefinite (each to 1e-10).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: Op,
    basis_label: String,
}

impl DensityMatrix {
    pub fn new(matrix: Op, basis_label: impl Into<String>) -> Result<Self> {
        let n = linalg::check_square(&matrix, "density matrix")?;
        if n == 0 {
            return Err(Error::Shape("empty density matrix".into()));
        }
        let herm = hermitian_defect(&matrix);
        if herm > STATE_TOL {
            return Err(Error::Validation(format!("density matrix not Hermitian (defect {herm:e})")));
        }
        let tr = linalg::trace(&matrix);
        if (tr - c(1.0, 0.0)).norm() > STATE_TOL {
            return Err(Error::Validation(format!("density matrix trace {tr} ≠ 1")));
        }
        // Exact symmetrization before the eigenvalue check keeps the
        // complex path away from round-off asymmetry.
        let sym = hermitize(&matrix);
        let min = linalg::eigvalsh(&sym)?.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -STATE_TOL {
            return Err(Error::Validation(format!("density matrix has eigenvalue {min:e} < 0")));
        }
        Ok(Self { matrix, basis_label: basis_label.into() })
    }

    pub fn matrix(&self) -> &Op {
        &self.matrix
    }

    pub fn basis_label(&self) -> &str {
        &self.basis_label
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Re-express in another basis: U ρ U† where the columns of U are the
    /// current basis vectors written in the new basis.
    pub fn rotate(&self, u: &Op, label: impl Into<String>) -> Result<Self> {
        if u.dim() != self.matrix.dim() {
            return Err(Error::Shape("basis change of wrong dimension".into()));
        }
        let m = u.dot(&self.matrix).dot(&dagger(&u.view()));
        Self::new(hermitize(&m), label)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("density matrix serializes")
    }
}

impl Serialize for DensityMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<[f64; 2]> = self.matrix.iter().map(|z| [z.re, z.im]).collect();
        let mut st = s.serialize_struct("DensityMatrix", 3)?;
        st.serialize_field("dimension", &self.dim())?;
        st.serialize_field("basis_label", &self.basis_label)?;
        st.serialize_field("entries", &entries)?;
        st.end()
    }
}

/// ρ^S = (1/N_δE) Σ_{η ∈ window} tr_E |E_η⟩⟨E_η|, computational basis.
pub fn microcanonical_reduced(
    space: &CompositeSpace,
    total: &Spectrum,
    window: &EnergyWindow,
) -> Result<DensityMatrix> {
    if window.member_indices.is_empty() {
        return Err(Error::EmptyWindow { lo: window.e_lo, hi: window.e_hi(), context: None });
    }
    check_total(space, total)?;
    let n = window.member_indices.len() as f64;
    let mut rho = Array2::zeros((space.n_s(), space.n_s()));
    for &eta in &window.member_indices {
        accumulate_reduced(&mut rho, &total.vectors.column(eta), space.n_env(), 1.0 / n);
    }
    DensityMatrix::new(rho, COMPUTATIONAL)
}

fn check_total(space: &CompositeSpace, total: &Spectrum) -> Result<()> {
    if total.vectors.nrows() != space.n_tot() {
        return Err(Error::Shape(format!(
            "total spectrum of dimension {} on a space of dimension {}",
            total.vectors.nrows(),
            space.n_tot()
        )));
    }
    Ok(())
}

/// Gaussian amplitudes for a window of `n` states.
pub fn gaussian_amplitudes(n: usize, seed: u64) -> Array1<C64> {
    let mut r = rng::stream(seed);
    (0..n).map(|_| rng::complex_gaussian(&mut r)).collect()
}

/// Reduced state of the normalized random superposition Σ C_η |E_η⟩ over
/// a window, without any of the expansion bookkeeping.
pub fn typical_vector_rho(
    space: &CompositeSpace,
    total: &Spectrum,
    window: &EnergyWindow,
    seed: u64,
) -> Result<DensityMatrix> {
    if window.member_indices.is_empty() {
        return Err(Error::EmptyWindow { lo: window.e_lo, hi: window.e_hi(), context: None });
    }
    check_total(space, total)?;
    let coeffs = gaussian_amplitudes(window.member_indices.len(), seed);
    let norm2: f64 = coeffs.iter().map(|z| z.norm_sqr()).sum();
    let mut psi = Array1::<C64>::zeros(space.n_tot());
    for (&eta, &cf) in window.member_indices.iter().zip(coeffs.iter()) {
        psi.scaled_add(cf, &total.vectors.column(eta));
    }
    let mut rho = Array2::zeros((space.n_s(), space.n_s()));
    accumulate_reduced(&mut rho, &psi.view(), space.n_env(), 1.0 / norm2);
    DensityMatrix::new(hermitize(&rho), COMPUTATIONAL)
}

/// Typical vector in the energy shell together with its expansion in the
/// uncoupled product basis.
#[derive(Debug, Clone, Serialize)]
pub struct TypicalStateReport {
    /// C_η for the window members, in window order.
    #[serde(skip)]
    pub coefficients: Array1<C64>,
    /// f^η_{αi} = ⟨E^S_α E^E_i|E_η⟩, one row per window member, columns
    /// α-major over (α, i).
    #[serde(skip)]
    pub expansion: Array2<C64>,
    /// K_{αi} = Σ_η C_η f^η_{αi}, shape n_s × n_env.
    #[serde(skip)]
    pub k_amps: Array2<C64>,
    /// ⟨Ω^E_α|Ω^E_α⟩ = Σ_i |K_{αi}|².
    pub omega_norms: Vec<f64>,
    /// Mean participation ratio of |f^η_{αi}|² over the window.
    pub n_major: f64,
    /// Σ_η |C_η|² (the squared normalization).
    pub norm2: f64,
    pub n_window: usize,
    /// Reduced state in the computational basis.
    pub rho: DensityMatrix,
    /// Reduced state in the eigenbasis of H^S.
    pub rho_eigen: DensityMatrix,
}

/// Expansion coefficients f^η_{αi} of the given total eigenvectors in the
/// product eigenbasis |E^S_α⟩ ⊗ |E^E_i⟩. Row r belongs to `etas[r]`.
pub fn product_expansion(
    space: &CompositeSpace,
    total: &Spectrum,
    etas: &[usize],
    sys: &Spectrum,
    env: &Spectrum,
) -> Result<Array2<C64>> {
    check_total(space, total)?;
    let (ns, ne) = (space.n_s(), space.n_env());
    if sys.len() != ns || env.len() != ne {
        return Err(Error::Shape("system/environment spectra do not match the space".into()));
    }
    // Stack Ψ_η (n_s × n_env reshapes) into (|etas|·n_s) × n_env, then
    // f = U_S† Ψ conj(U_E).
    let mut stacked = Array2::<C64>::zeros((etas.len() * ns, ne));
    for (r, &eta) in etas.iter().enumerate() {
        let col = total.vectors.column(eta);
        for s in 0..ns {
            for e in 0..ne {
                stacked[[r * ns + s, e]] = col[s * ne + e];
            }
        }
    }
    let ue_conj = env.vectors.mapv(|z| z.conj());
    let right = stacked.dot(&ue_conj);
    drop(stacked);
    let us_dag = dagger(&sys.vectors.view());
    let mut out = Array2::<C64>::zeros((etas.len(), ns * ne));
    for r in 0..etas.len() {
        let blk = right.slice(ndarray::s![r * ns..(r + 1) * ns, ..]);
        let f = us_dag.dot(&blk);
        for a in 0..ns {
            for i in 0..ne {
                out[[r, a * ne + i]] = f[[a, i]];
            }
        }
    }
    Ok(out)
}

/// Participation ratio (Σp)²/Σp² of a population vector.
pub fn participation_ratio(p: impl Iterator<Item = f64>) -> f64 {
    let (s1, s2) = p.fold((0.0, 0.0), |(a, b), x| (a + x, b + x * x));
    if s2 == 0.0 {
        0.0
    } else {
        s1 * s1 / s2
    }
}

pub fn typical_vector_reduced(
    space: &CompositeSpace,
    total: &Spectrum,
    window: &EnergyWindow,
    sys: &Spectrum,
    env: &Spectrum,
    seed: u64,
) -> Result<TypicalStateReport> {
    if window.member_indices.is_empty() {
        return Err(Error::EmptyWindow { lo: window.e_lo, hi: window.e_hi(), context: None });
    }
    let (ns, ne) = (space.n_s(), space.n_env());
    let coefficients = gaussian_amplitudes(window.member_indices.len(), seed);
    let expansion = product_expansion(space, total, &window.member_indices, sys, env)?;
    let mut k_amps = Array2::<C64>::zeros((ns, ne));
    for (r, &cf) in coefficients.iter().enumerate() {
        for a in 0..ns {
            for i in 0..ne {
                k_amps[[a, i]] += cf * expansion[[r, a * ne + i]];
            }
        }
    }
    let norm2: f64 = coefficients.iter().map(|z| z.norm_sqr()).sum();
    let omega = k_amps.dot(&dagger(&k_amps.view()));
    let omega_norms = (0..ns).map(|a| omega[[a, a]].re).collect();
    let rho_e = hermitize(&omega.mapv(|z| z / norm2));
    let rho_eigen = DensityMatrix::new(rho_e, SYSTEM_EIGENBASIS)?;
    let rho = rho_eigen.rotate(&sys.vectors, COMPUTATIONAL)?;
    let n_major = expansion
        .rows()
        .into_iter()
        .map(|row| participation_ratio(row.iter().map(|z| z.norm_sqr())))
        .sum::<f64>()
        / expansion.nrows() as f64;
    Ok(TypicalStateReport {
        coefficients,
        expansion,
        k_amps,
        omega_norms,
        n_major,
        norm2,
        n_window: window.n_members,
        rho,
        rho_eigen,
    })
}

/// Reduced state of a Gaussian random unit vector in H_d, in the
/// computational basis.
pub fn typical_vector_direct_sum(
    sys: &Spectrum,
    basis: &DirectSumBasis,
    seed: u64,
) -> Result<DensityMatrix> {
    if basis.dim() == 0 {
        return Err(Error::Validation("H_d is empty".into()));
    }
    let ns = sys.len();
    let amps = gaussian_amplitudes(basis.dim(), seed);
    let norm2: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
    // Environment eigenvectors are orthonormal, so only pairs sharing the
    // same i contribute: ρ_{αβ} = Σ_i c_{αi} c*_{βi}.
    let mut by_level: Vec<std::collections::BTreeMap<usize, C64>> = vec![Default::default(); ns];
    for (&(a, i), &z) in basis.members.iter().zip(amps.iter()) {
        by_level[a].insert(i, z);
    }
    let mut rho = Array2::<C64>::zeros((ns, ns));
    for a in 0..ns {
        for b in 0..ns {
            let mut acc = ZERO;
            for (i, za) in &by_level[a] {
                if let Some(zb) = by_level[b].get(i) {
                    acc += za * zb.conj();
                }
            }
            rho[[a, b]] = acc / norm2;
        }
    }
    DensityMatrix::new(hermitize(&rho), SYSTEM_EIGENBASIS)?.rotate(&sys.vectors, COMPUTATIONAL)
}

/// exp(−βH)/tr exp(−βH) via the eigendecomposition of H.
pub fn canonical_state(h_eff: &Op, beta: f64) -> Result<DensityMatrix> {
    let (w, v) = linalg::eigh(&hermitian_checked(h_eff)?)?;
    let p = boltzmann(w.as_slice().expect("contiguous"), beta);
    let vp = &v * &Array1::from_iter(p.iter().map(|&x| c(x, 0.0)));
    DensityMatrix::new(hermitize(&vp.dot(&dagger(&v.view()))), COMPUTATIONAL)
}

fn hermitian_checked(h: &Op) -> Result<Op> {
    linalg::check_square(h, "Hamiltonian")?;
    let scale = linalg::max_abs(&h.view()).max(1.0);
    if hermitian_defect(h) > STATE_TOL * scale {
        return Err(Error::Validation("effective Hamiltonian is not Hermitian".into()));
    }
    Ok(hermitize(h))
}

/// Normalized Boltzmann weights; the exponent is shifted by its maximum,
/// which for β ≥ 0 is the shift by the minimum eigenvalue.
pub fn boltzmann(energies: &[f64], beta: f64) -> Vec<f64> {
    let x: Vec<f64> = energies.iter().map(|e| -beta * e).collect();
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn mean_energy(energies: &[f64], beta: f64) -> f64 {
    boltzmann(energies, beta).iter().zip(energies).map(|(p, e)| p * e).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaFit {
    pub beta: f64,
    pub target_energy: f64,
    /// |U(β) − target|.
    pub residual: f64,
}

/// Inverse temperature of the canonical state of `h_eff` whose mean energy
/// equals tr(ρ h_eff). Bisection on a bracket that doubles until it
/// contains the root.
pub fn fit_beta(rho: &DensityMatrix, h_eff: &Op) -> Result<BetaFit> {
    let h = hermitian_checked(h_eff)?;
    if h.dim() != rho.matrix().dim() {
        return Err(Error::Shape("state and Hamiltonian dimensions differ".into()));
    }
    let target = linalg::trace(&rho.matrix().dot(&h)).re;
    let w = linalg::eigvalsh(&h)?;
    let e = w.as_slice().expect("contiguous");
    let (emin, emax) = (e[0], e[e.len() - 1]);
    let span = emax - emin;
    if !(target > emin && target < emax) || span <= 0.0 {
        return Err(Error::Unfittable { target, min: emin, max: emax });
    }
    let tol = 1e-10 * span;
    let f = |b: f64| mean_energy(e, b) - target;
    if f(0.0).abs() <= tol {
        return Ok(BetaFit { beta: 0.0, target_energy: target, residual: f(0.0).abs() });
    }
    let scale = 1.0 / span;
    let (mut lo, mut hi) = (-scale, scale);
    let mut guard = 0;
    while f(lo) < 0.0 {
        lo *= 2.0;
        guard += 1;
        if guard > 2000 {
            return Err(Error::Unfittable { target, min: emin, max: emax });
        }
    }
    while f(hi) > 0.0 {
        hi *= 2.0;
        guard += 1;
        if guard > 2000 {
            return Err(Error::Unfittable { target, min: emin, max: emax });
        }
    }
    // f is decreasing in β: f(lo) ≥ 0 ≥ f(hi).
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..400 {
        mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= tol && hi - lo < 1e-12 * (1.0 + mid.abs()) {
            break;
        }
        if fm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
            break;
        }
    }
    let residual = f(mid).abs();
    if residual > tol {
        return Err(Error::Numeric(format!("β bisection stalled with residual {residual:e}")));
    }
    Ok(BetaFit { beta: mid, target_energy: target, residual })
}

/// β minimizing the trace distance between ρ and the canonical state of
/// `h_eff`, searched around `beta_hint` (grid scan plus golden-section
/// refinement). Reported alongside the energy-matched value.
pub fn distance_minimizing_beta(rho: &DensityMatrix, h_eff: &Op, beta_hint: f64) -> Result<(f64, f64)> {
    let h = hermitian_checked(h_eff)?;
    let w = linalg::eigvalsh(&h)?;
    let span = (w[w.len() - 1] - w[0]).max(1e-300);
    let reach = 10.0 / span;
    let d = |b: f64| -> Result<f64> { trace_distance(rho, &canonical_state(&h, b)?) };
    let n = 200;
    let mut best = (beta_hint, d(beta_hint)?);
    for k in 0..=n {
        let b = beta_hint - reach + 2.0 * reach * k as f64 / n as f64;
        let v = d(b)?;
        if v < best.1 {
            best = (b, v);
        }
    }
    let step = 2.0 * reach / n as f64;
    let (mut a, mut bb) = (best.0 - step, best.0 + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = bb - g * (bb - a);
    let mut x2 = a + g * (bb - a);
    let (mut f1, mut f2) = (d(x1)?, d(x2)?);
    for _ in 0..80 {
        if f1 < f2 {
            bb = x2;
            x2 = x1;
            f2 = f1;
            x1 = bb - g * (bb - a);
            f1 = d(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (bb - a);
            f2 = d(x2)?;
        }
    }
    let (xb, fb) = if f1 < f2 { (x1, f1) } else { (x2, f2) };
    Ok(if fb < best.1 { (xb, fb) } else { best })
}

/// (1/2) Σ |λ_k(a − b)|.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    trace_distance_ops(a.matrix(), b.matrix())
}

pub fn trace_distance_ops(a: &Op, b: &Op) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("trace distance of {:?} and {:?}", a.dim(), b.dim())));
    }
    let d = hermitize(&(a - b));
    let w = linalg::eigvalsh(&d)?;
    Ok((0.5 * w.iter().map(|x| x.abs()).sum::<f64>()).min(1.0))
}
