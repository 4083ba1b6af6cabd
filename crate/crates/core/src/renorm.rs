//! Interaction blocks, environmental averages and the self-consistent
//! renormalized system Hamiltonian H̃^S = H^S + H^I_S.
//!
//! In a system basis {|α⟩} the interaction decomposes into blocks
//! H^I_{αβ} = ⟨α|H^I|β⟩, operators on A. The renormalization term is
//!
//! ```text
//! (H^I_S)_{α̃β̃} = ⟨H^I_{α̃β̃}⟩_γ̃,   γ̃ = β̃ if E_α̃ > E_β̃, else α̃,
//! ```
//!
//! the average of ⟨E^E_i|H^I_{α̃β̃}|E^E_i⟩ over the environment states with
//! E^E_i ∈ [E − E_γ̃, E − E_γ̃ + δE]. Because the basis {|E_α̃⟩} is the
//! eigenbasis of H̃^S itself, the definition is solved by fixed-point
//! iteration.

use ndarray::Array2;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::hilbert::CompositeSpace;
use crate::linalg::{self, c, dagger, hermitize, identity, kron, Op, C64, ZERO};
use crate::models::HamiltonianSet;
use crate::spectra::{self, diagonalize, EnvWindow, Spectrum};

/// All N_S² blocks H^I_{αβ} in a given system basis plus derived scales.
#[derive(Debug, Clone)]
pub struct InteractionBlocks {
    pub n_s: usize,
    pub n_a: usize,
    /// Columns are the basis vectors |α⟩ in the computational basis.
    pub basis: Op,
    pub energies: Vec<f64>,
    /// Row-major over (α, β): `blocks[α·n_s + β]`.
    pub blocks: Vec<Op>,
    /// h^dia_{αβ} = tr_A(H^I_{αβ}) / N_A.
    pub h_dia: Array2<C64>,
    /// h_{αβ}: mean absolute element of H^I_{αβ} in the A basis.
    pub h_ab: Array2<f64>,
    /// h = max_{αβ} h_{αβ}.
    pub h_max: f64,
    /// max_{αβ} |h^dia_{αβ}|.
    pub h_d: f64,
    /// q_α = Σ_{β≠α} |E_α − E_β|^{-2}.
    pub q_alpha: Vec<f64>,
}

impl InteractionBlocks {
    pub fn block(&self, alpha: usize, beta: usize) -> &Op {
        &self.blocks[alpha * self.n_s + beta]
    }

    /// (H^I_{αβ})_{ij} = ⟨E^E_i|H^I_{αβ}|E^E_j⟩.
    pub fn element(&self, space: &CompositeSpace, env: &Spectrum, alpha: usize, beta: usize, i: usize, j: usize) -> C64 {
        space.a_matrix_element(self.block(alpha, beta), &env.vectors.column(i), &env.vectors.column(j))
    }

    /// Hermiticity defect max ‖H^I_{βα} − (H^I_{αβ})†‖.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.n_s {
            for b in 0..self.n_s {
                let d = dagger(&self.block(a, b).view());
                worst = worst.max(linalg::max_abs_diff(self.block(b, a), &d));
            }
        }
        worst
    }
}

/// Blocks of `hs.h_int` in the system basis given by `basis` (columns) with
/// level energies `energies`.
pub fn interaction_blocks_in(hs: &HamiltonianSet, basis: &Op, energies: &[f64]) -> Result<InteractionBlocks> {
    let (ns, na) = (hs.space.n_s(), hs.space.n_a());
    if basis.dim() != (ns, ns) || energies.len() != ns {
        return Err(Error::Shape("system basis does not match the system dimension".into()));
    }
    let mut blocks = Vec::with_capacity(ns * ns);
    for a in 0..ns {
        for b in 0..ns {
            let blk = Array2::from_shape_fn((na, na), |(m, m2)| {
                let mut acc = ZERO;
                for s in 0..ns {
                    let left = basis[[s, a]].conj();
                    if left == ZERO {
                        continue;
                    }
                    for t in 0..ns {
                        acc += left * hs.h_int[[s * na + m, t * na + m2]] * basis[[t, b]];
                    }
                }
                acc
            });
            blocks.push(blk);
        }
    }
    let h_dia = Array2::from_shape_fn((ns, ns), |(a, b)| linalg::trace(&blocks[a * ns + b]) / na as f64);
    let h_ab = Array2::from_shape_fn((ns, ns), |(a, b)| {
        blocks[a * ns + b].iter().map(|z| z.norm()).sum::<f64>() / (na * na) as f64
    });
    let h_max = h_ab.iter().copied().fold(0.0, f64::max);
    let h_d = h_dia.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let q_alpha = (0..ns)
        .map(|a| (0..ns).filter(|&b| b != a).map(|b| (energies[a] - energies[b]).powi(-2)).sum())
        .collect();
    Ok(InteractionBlocks {
        n_s: ns,
        n_a: na,
        basis: basis.clone(),
        energies: energies.to_vec(),
        blocks,
        h_dia,
        h_ab,
        h_max,
        h_d,
        q_alpha,
    })
}

pub fn interaction_blocks(hs: &HamiltonianSet, sys_basis: &Spectrum) -> Result<InteractionBlocks> {
    interaction_blocks_in(hs, &sys_basis.vectors, sys_basis.values.as_slice().expect("contiguous"))
}

/// (1/N) Σ_{i ∈ window} ⟨E^E_i|O|E^E_i⟩. `op` may act on A (it is then
/// promoted by 1_B) or on the whole environment.
pub fn env_average(space: &CompositeSpace, op: &Op, window: &EnvWindow, env: &Spectrum) -> Result<C64> {
    window.require_nonempty("the averaging level")?;
    let n = window.n_members as f64;
    let dim = linalg::check_square(op, "averaged operator")?;
    let mut acc = ZERO;
    if dim == space.n_a() {
        for &i in &window.member_indices {
            let v = env.vectors.column(i);
            acc += space.a_matrix_element(op, &v, &v);
        }
    } else if dim == space.n_env() {
        for &i in &window.member_indices {
            let v = env.vectors.column(i);
            let ov = op.dot(&v);
            acc += v.iter().zip(ov.iter()).map(|(x, y)| x.conj() * y).sum::<C64>();
        }
    } else {
        return Err(Error::Shape(format!("cannot average an operator of dimension {dim}")));
    }
    Ok(acc / n)
}

/// Which level's environment window the pair (α̃, β̃) is averaged over:
/// β̃ when E_α̃ > E_β̃, α̃ otherwise (including the diagonal).
pub fn gamma_rule(alpha_energy: f64, beta_energy: f64) -> Gamma {
    if alpha_energy > beta_energy {
        Gamma::Beta
    } else {
        Gamma::Alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Gamma {
    Alpha,
    Beta,
}

impl Gamma {
    pub fn pick(self, alpha: usize, beta: usize) -> usize {
        match self {
            Gamma::Alpha => alpha,
            Gamma::Beta => beta,
        }
    }
}

pub fn gamma_index(energies: &[f64], alpha: usize, beta: usize) -> usize {
    gamma_rule(energies[alpha], energies[beta]).pick(alpha, beta)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvAverage {
    pub alpha: usize,
    pub beta: usize,
    pub gamma: usize,
    pub n_window: usize,
    pub value: [f64; 2],
}

/// H^I_S assembled in one basis.
#[derive(Debug, Clone)]
pub struct HisBuild {
    /// H^I_S in the computational basis.
    pub his: Op,
    /// The Hermitized matrix ((M + M†)/2) in the basis used.
    pub his_in_basis: Op,
    /// ‖M − M†‖_max before Hermitization.
    pub asymmetry: f64,
    pub table: Vec<EnvAverage>,
    pub windows: Vec<EnvWindow>,
}

/// Environment windows for the given level energies, with every window
/// required to be non-empty.
pub fn level_windows(env: &Spectrum, energies: &[f64], e_lo: f64, width: f64) -> Result<Vec<EnvWindow>> {
    let ws = spectra::env_windows(env, energies, e_lo, width)?;
    for (k, w) in ws.iter().enumerate() {
        w.require_nonempty(&format!("level {k}"))?;
    }
    Ok(ws)
}

pub fn build_his_in(
    hs: &HamiltonianSet,
    basis: &Op,
    energies: &[f64],
    env: &Spectrum,
    e_lo: f64,
    width: f64,
) -> Result<HisBuild> {
    let blocks = interaction_blocks_in(hs, basis, energies)?;
    let ns = blocks.n_s;
    let windows = level_windows(env, energies, e_lo, width)?;
    let mut m = Array2::<C64>::zeros((ns, ns));
    let mut table = Vec::with_capacity(ns * ns);
    for a in 0..ns {
        for b in 0..ns {
            let g = gamma_index(energies, a, b);
            let v = env_average(&hs.space, blocks.block(a, b), &windows[g], env)?;
            m[[a, b]] = v;
            table.push(EnvAverage { alpha: a, beta: b, gamma: g, n_window: windows[g].n_members, value: [v.re, v.im] });
        }
    }
    let asymmetry = linalg::max_abs_diff(&m, &dagger(&m.view()));
    let his_in_basis = hermitize(&m);
    let his = basis.dot(&his_in_basis).dot(&dagger(&basis.view()));
    Ok(HisBuild { his: hermitize(&his), his_in_basis, asymmetry, table, windows })
}

pub fn build_his(hs: &HamiltonianSet, sys_basis: &Spectrum, env: &Spectrum, e_lo: f64, width: f64) -> Result<HisBuild> {
    build_his_in(hs, &sys_basis.vectors, sys_basis.values.as_slice().expect("contiguous"), env, e_lo, width)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RenormOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Under-relaxation weight of the new H^I_S (1 = plain iteration).
    pub mixing: f64,
    /// Halve the mixing weight when the residual grows twice in a row.
    pub adaptive_mixing: bool,
}

impl Default for RenormOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 200, mixing: 1.0, adaptive_mixing: true }
    }
}

#[derive(Debug, Clone)]
pub struct RenormalizedFrame {
    pub h_s_tilde: Op,
    pub h_is: Op,
    /// {|E_α̃⟩, E_α̃}: eigen-decomposition of H̃^S.
    pub sys_spectrum_tilde: Spectrum,
    /// Basis and energies in which the final H^I_S was assembled.
    pub his_basis: Op,
    pub his_energies: Vec<f64>,
    pub env_averages: Vec<EnvAverage>,
    pub windows: Vec<EnvWindow>,
    pub iterations: usize,
    pub residual: f64,
    pub residuals: Vec<f64>,
    pub asymmetry: f64,
    pub mixing: f64,
    pub e_lo: f64,
    pub width: f64,
}

impl RenormalizedFrame {
    /// H̃^I = H^I − H^I_S ⊗ 1_A, on S ⊗ A.
    pub fn h_int_tilde(&self, hs: &HamiltonianSet) -> Op {
        &hs.h_int - &kron(&self.h_is, &identity(hs.space.n_a()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("frame serializes")
    }
}

pub(crate) fn op_json(m: &Op) -> Vec<Vec<[f64; 2]>> {
    m.rows().into_iter().map(|r| r.iter().map(|z| [z.re, z.im]).collect()).collect()
}

impl Serialize for RenormalizedFrame {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("RenormalizedFrame", 9)?;
        st.serialize_field("h_s_tilde", &op_json(&self.h_s_tilde))?;
        st.serialize_field("h_is", &op_json(&self.h_is))?;
        st.serialize_field("energies_tilde", &self.sys_spectrum_tilde.values.to_vec())?;
        st.serialize_field("iterations", &self.iterations)?;
        st.serialize_field("residual", &self.residual)?;
        st.serialize_field("residual_trace", &self.residuals)?;
        st.serialize_field("asymmetry", &self.asymmetry)?;
        st.serialize_field("mixing", &self.mixing)?;
        st.serialize_field("env_averages", &self.env_averages)?;
        st.end()
    }
}

/// max | |⟨u_i|v_j⟩| − P_ij | where P is the permutation matching each new
/// vector to the old one it overlaps most.
pub fn basis_change_residual(old: &Op, new: &Op) -> f64 {
    let ov = dagger(&old.view()).dot(new);
    let n = ov.ncols();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let col = ov.column(j);
        let best = (0..n).max_by(|&a, &b| col[a].norm().total_cmp(&col[b].norm())).unwrap_or(0);
        for i in 0..n {
            let p = if i == best { 1.0 } else { 0.0 };
            worst = worst.max((col[i].norm() - p).abs());
        }
    }
    worst
}

/// Solve H̃^S = H^S + H^I_S[H̃^S] by fixed-point iteration from the
/// eigenbasis of H^S.
pub fn renormalize(hs: &HamiltonianSet, env: &Spectrum, e_lo: f64, width: f64, opts: RenormOptions) -> Result<RenormalizedFrame> {
    let bare = diagonalize(&hs.h_s)?;
    renormalize_from(hs, env, e_lo, width, opts, bare)
}

/// Fixed-point iteration seeded by an arbitrary orthonormal system basis
/// with its level energies.
pub fn renormalize_from(
    hs: &HamiltonianSet,
    env: &Spectrum,
    e_lo: f64,
    width: f64,
    opts: RenormOptions,
    start: Spectrum,
) -> Result<RenormalizedFrame> {
    if opts.max_iter == 0 {
        return Err(Error::Validation("max_iter must be at least 1".into()));
    }
    if !(opts.mixing > 0.0 && opts.mixing <= 1.0) {
        return Err(Error::Validation(format!("mixing {} outside (0, 1]", opts.mixing)));
    }
    let mut basis = start.vectors;
    let mut energies = start.values.to_vec();
    let mut his_prev: Option<Op> = None;
    let mut mixing = opts.mixing;
    let mut residuals = Vec::new();
    for it in 1..=opts.max_iter {
        let build = build_his_in(hs, &basis, &energies, env, e_lo, width)?;
        let his = match &his_prev {
            Some(prev) if mixing < 1.0 => &build.his * c(mixing, 0.0) + prev * c(1.0 - mixing, 0.0),
            _ => build.his.clone(),
        };
        let h_s_tilde = &hs.h_s + &his;
        let spec = diagonalize(&h_s_tilde)?;
        let residual = basis_change_residual(&basis, &spec.vectors);
        residuals.push(residual);
        if residual < opts.tol {
            return Ok(RenormalizedFrame {
                h_s_tilde,
                h_is: his,
                his_basis: basis,
                his_energies: energies,
                sys_spectrum_tilde: spec,
                env_averages: build.table,
                windows: build.windows,
                iterations: it,
                residual,
                residuals,
                asymmetry: build.asymmetry,
                mixing,
                e_lo,
                width,
            });
        }
        let n = residuals.len();
        if opts.adaptive_mixing && n >= 3 && residuals[n - 1] > residuals[n - 2] && residuals[n - 2] > residuals[n - 3] {
            mixing = (mixing * 0.5).max(0.05);
            log::info!("renormalization residual growing; mixing reduced to {mixing}");
        }
        his_prev = Some(his);
        basis = spec.vectors;
        energies = spec.values.to_vec();
    }
    Err(Error::Convergence { iterations: opts.max_iter, last: *residuals.last().unwrap_or(&f64::NAN), residuals })
}

/// Decomposition H̃^S = H^S + ε Σ_l J̄^A_l J^S_l + ΔH^S.
#[derive(Debug, Clone)]
pub struct MeanFieldSplit {
    /// J̄^A_l: mean of ⟨J^A_l⟩_γ̃ over the levels γ̃.
    pub mean_field: Vec<f64>,
    pub mf_operator: Op,
    pub delta_hs: Op,
    /// ⟨J^A_l⟩_γ̃, indexed [l][γ̃].
    pub per_level_expectations: Vec<Vec<f64>>,
}

impl Serialize for MeanFieldSplit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("MeanFieldSplit", 4)?;
        st.serialize_field("mean_field", &self.mean_field)?;
        st.serialize_field("mf_operator", &op_json(&self.mf_operator))?;
        st.serialize_field("delta_hs", &op_json(&self.delta_hs))?;
        st.serialize_field("per_level_expectations", &self.per_level_expectations)?;
        st.end()
    }
}

pub fn mean_field_split(frame: &RenormalizedFrame, hs: &HamiltonianSet, env: &Spectrum) -> Result<MeanFieldSplit> {
    let terms = hs.factorized()?;
    let ns = hs.space.n_s();
    let mut per_level = Vec::with_capacity(terms.len());
    for t in terms {
        let mut row = Vec::with_capacity(ns);
        for w in &frame.windows {
            row.push(env_average(&hs.space, &t.j_a, w, env)?.re);
        }
        per_level.push(row);
    }
    let mean_field: Vec<f64> = per_level.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let mut mf = Op::zeros((ns, ns));
    for (t, jbar) in terms.iter().zip(&mean_field) {
        mf = mf + t.j_s.mapv(|z| z * (hs.epsilon * jbar));
    }
    let delta_hs = delta_hs_from(frame, hs, &per_level, &mean_field)?;
    Ok(MeanFieldSplit { mean_field, mf_operator: mf, delta_hs, per_level_expectations: per_level })
}

/// ΔH^S = Σ_{α̃β̃} ε Σ_l (J^S_l)_{α̃β̃} (⟨J^A_l⟩_γ̃ − J̄^A_l) |E_α̃⟩⟨E_β̃|, in
/// the basis the frame's H^I_S was assembled in, Hermitized like H^I_S.
pub fn delta_hs_from(
    frame: &RenormalizedFrame,
    hs: &HamiltonianSet,
    per_level: &[Vec<f64>],
    mean_field: &[f64],
) -> Result<Op> {
    let terms = hs.factorized()?;
    let ns = hs.space.n_s();
    let u = &frame.his_basis;
    let e = &frame.his_energies;
    let mut m = Array2::<C64>::zeros((ns, ns));
    for (l, t) in terms.iter().enumerate() {
        let js = dagger(&u.view()).dot(&t.j_s).dot(u);
        for a in 0..ns {
            for b in 0..ns {
                let g = gamma_index(e, a, b);
                m[[a, b]] += js[[a, b]] * (hs.epsilon * (per_level[l][g] - mean_field[l]));
            }
        }
    }
    Ok(hermitize(&u.dot(&hermitize(&m)).dot(&dagger(&u.view()))))
}

/// One tabulated diagonal element (H̃^I_{α̃β̃})_{ii} with its bare
/// counterpart (H^I_{αβ})_{ii} (same labels, bare H^S basis).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiagonalElement {
    pub alpha: usize,
    pub beta: usize,
    pub i: usize,
    /// Whether i lies in the window of γ̃(α̃, β̃) (otherwise it lies only in
    /// the other level's window).
    pub in_gamma_window: bool,
    pub renormalized: [f64; 2],
    pub bare: [f64; 2],
}

impl DiagonalElement {
    pub fn renormalized_abs(&self) -> f64 {
        self.renormalized[0].hypot(self.renormalized[1])
    }
    pub fn bare_abs(&self) -> f64 {
        self.bare[0].hypot(self.bare[1])
    }
}

/// Tabulate (H̃^I_{α̃β̃})_{ii} = (H^I_{α̃β̃})_{ii} − (H^I_S)_{α̃β̃} for every
/// pair and every i in the union of the two levels' environment windows.
/// Agreement of fixed points reached from different seeds.
#[derive(Debug, Clone, Serialize)]
pub struct MultiStart {
    /// Number of randomly perturbed starts.
    pub starts: usize,
    /// Starts that converged.
    pub converged: usize,
    /// max over converged starts of max |H̃^S − H̃^S_bare|.
    pub max_deviation: f64,
}

/// Renormalizes again from `starts` random perturbations of the bare
/// basis, H^S + (strength·‖H^S‖_max) R with R a random Hermitian matrix
/// of unit max-norm, and compares each H̃^S with `reference`.
pub fn multi_start(
    hs: &HamiltonianSet,
    env: &Spectrum,
    reference: &RenormalizedFrame,
    opts: RenormOptions,
    starts: usize,
    strength: f64,
    seed: u64,
) -> Result<MultiStart> {
    let n = hs.space.n_s();
    let scale = strength * linalg::max_abs(&hs.h_s.view());
    let mut converged = 0;
    let mut max_deviation: f64 = 0.0;
    for k in 0..starts {
        let mut r = crate::rng::child(seed, k as u64);
        let raw = Array2::from_shape_fn((n, n), |_| crate::rng::complex_gaussian(&mut r));
        let pert = hermitize(&raw);
        let norm = linalg::max_abs(&pert.view()).max(f64::MIN_POSITIVE);
        let start = diagonalize(&(&hs.h_s + &pert.mapv(|z| z * (scale / norm))))?;
        match renormalize_from(hs, env, reference.e_lo, reference.width, opts, start) {
            Ok(f) => {
                converged += 1;
                max_deviation = max_deviation.max(linalg::max_abs_diff(&f.h_s_tilde, &reference.h_s_tilde));
            }
            Err(Error::Convergence { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(MultiStart { starts, converged, max_deviation })
}

pub fn renormalized_diagonal_elements(frame: &RenormalizedFrame, hs: &HamiltonianSet, env: &Spectrum) -> Result<Vec<DiagonalElement>> {
    let sp = &hs.space;
    let ns = sp.n_s();
    let tilde = &frame.sys_spectrum_tilde;
    let blocks_t = interaction_blocks(hs, tilde)?;
    let his_t = dagger(&tilde.vectors.view()).dot(&frame.h_is).dot(&tilde.vectors);
    let bare = diagonalize(&hs.h_s)?;
    let blocks_b = interaction_blocks(hs, &bare)?;
    let e = tilde.values.as_slice().expect("contiguous");
    let windows = spectra::env_windows(env, e, frame.e_lo, frame.width)?;
    let mut out = Vec::new();
    for a in 0..ns {
        for b in 0..ns {
            let g = gamma_index(e, a, b);
            let other = if g == a { b } else { a };
            let mut idx: Vec<(usize, bool)> = windows[g].member_indices.iter().map(|&i| (i, true)).collect();
            idx.extend(windows[other].member_indices.iter().filter(|i| !windows[g].contains(**i)).map(|&i| (i, false)));
            for (i, in_gamma) in idx {
                let v = env.vectors.column(i);
                let r = sp.a_matrix_element(blocks_t.block(a, b), &v, &v) - his_t[[a, b]];
                let q = sp.a_matrix_element(blocks_b.block(a, b), &v, &v);
                out.push(DiagonalElement {
                    alpha: a,
                    beta: b,
                    i,
                    in_gamma_window: in_gamma,
                    renormalized: [r.re, r.im],
                    bare: [q.re, q.im],
                });
            }
        }
    }
    Ok(out)
}
