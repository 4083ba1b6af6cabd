//! Numerical checks of the estimates the renormalized canonical form rests
//! on: flatness of the G coefficients, the magnitude hierarchy of the
//! interaction elements in the environment eigenbasis, the perturbative
//! width of total eigenstates in the uncoupled basis, ETH window statistics
//! and the structure of typical reduced states.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::Serialize;

use crate::ensembles::{self, participation_ratio, TypicalStateReport};
use crate::error::{Error, Result};
use crate::hilbert::CompositeSpace;
use crate::linalg::{self, Op, C64, ZERO};
use crate::models::HamiltonianSet;
use crate::renorm::{gamma_index, InteractionBlocks};
use crate::rng;
use crate::spectra::{diagonalize, EnvWindow, Spectrum};
use crate::stats::{self, summarize, Summary};

/// Default slack applied to order-of-magnitude ("≲") bounds.
pub const DEFAULT_SLACK: f64 = 3.0;
/// Default ETH threshold: window stddev relative to the observable's span.
pub const DEFAULT_ETH_THRESHOLD: f64 = 0.05;

/// Index range [n/4, 3n/4) of the spectrum centre (everything when n < 4).
pub fn central_half(n: usize) -> std::ops::Range<usize> {
    if n < 4 {
        0..n
    } else {
        n / 4..(3 * n) / 4
    }
}

fn sample_pair<R: Rng>(r: &mut R, range: &std::ops::Range<usize>) -> (usize, usize) {
    let i = r.random_range(range.clone());
    if range.len() < 2 {
        return (i, i);
    }
    loop {
        let j = r.random_range(range.clone());
        if j != i {
            return (i, j);
        }
    }
}

// ---------------------------------------------------------------- G statistics

#[derive(Debug, Clone, Serialize)]
pub struct GStats {
    pub n_a: usize,
    pub n_env: usize,
    pub sampled_states: Vec<usize>,
    /// |C^i_{mq}| for one random (m, q) per sampled i.
    pub c_coeffs: Vec<f64>,
    /// G^{ii}_{mm} for every m and sampled i.
    pub g_diag: Vec<f64>,
    /// |G^{ij}_{mm'}|, i ≠ j.
    pub g_offdiag: Vec<f64>,
    pub c_summary: Summary,
    pub g_diag_summary: Summary,
    pub g_offdiag_summary: Summary,
    /// max_i |Σ_m G^{ii}_{mm} − 1|.
    pub normalization_defect: f64,
    /// max over sampled (i, m, m') of |Σ_j |G^{ij}_{mm'}|² − G^{ii}_{mm}|.
    pub completeness_defect: f64,
    pub completeness_triples: usize,
}

impl GStats {
    /// mean G^{ii}_{mm} · N_A (1 when the A factor is evenly populated).
    pub fn diag_ratio(&self) -> f64 {
        self.g_diag_summary.mean * self.n_a as f64
    }

    /// mean |G^{ij}_{mm'}| · (N_E N_A)^{1/2}.
    pub fn offdiag_ratio(&self) -> f64 {
        self.g_offdiag_summary.mean * ((self.n_env * self.n_a) as f64).sqrt()
    }
}

fn g_diag_value(space: &CompositeSpace, v: &ndarray::ArrayView1<C64>, m: usize) -> f64 {
    let nb = space.n_b();
    v.slice(s![m * nb..(m + 1) * nb]).iter().map(|z| z.norm_sqr()).sum()
}

/// Samples C and G coefficients over the central half of the environment
/// spectrum and checks the normalization and completeness identities.
pub fn g_statistics(env: &Spectrum, space: &CompositeSpace, sample_count: usize, seed: u64) -> Result<GStats> {
    let (na, nb, ne) = (space.n_a(), space.n_b(), space.n_env());
    if env.len() != ne {
        return Err(Error::Shape(format!("environment spectrum of size {} on N_E = {ne}", env.len())));
    }
    if sample_count == 0 {
        return Err(Error::Validation("sample_count must be positive".into()));
    }
    let range = central_half(ne);
    let mut r = rng::stream(seed);
    let mut sampled = Vec::with_capacity(sample_count);
    let mut c_coeffs = Vec::with_capacity(sample_count);
    let mut g_diag = Vec::with_capacity(sample_count * na);
    let mut g_off = Vec::with_capacity(sample_count);
    let mut norm_defect: f64 = 0.0;
    for _ in 0..sample_count {
        let i = r.random_range(range.clone());
        sampled.push(i);
        let v = env.vectors.column(i);
        c_coeffs.push(v[r.random_range(0..ne)].norm());
        let mut total = 0.0;
        for m in 0..na {
            let g = g_diag_value(space, &v, m);
            total += g;
            g_diag.push(g);
        }
        norm_defect = norm_defect.max((total - 1.0).abs());
        let (i2, j2) = sample_pair(&mut r, &range);
        let (m, m2) = (r.random_range(0..na), r.random_range(0..na));
        let g = space.g_coefficients(&env.vectors.column(i2), &env.vectors.column(j2));
        g_off.push(g[[m, m2]].norm());
    }
    let triples = sample_count.min(32);
    let mut compl: f64 = 0.0;
    for _ in 0..triples {
        let i = r.random_range(range.clone());
        let (m, m2) = (r.random_range(0..na), r.random_range(0..na));
        let ci = env.vectors.slice(s![m * nb..(m + 1) * nb, i]).mapv(|z| z.conj());
        let row = ci.dot(&env.vectors.slice(s![m2 * nb..(m2 + 1) * nb, ..]));
        let lhs: f64 = row.iter().map(|z| z.norm_sqr()).sum();
        compl = compl.max((lhs - g_diag_value(space, &env.vectors.column(i), m)).abs());
    }
    Ok(GStats {
        n_a: na,
        n_env: ne,
        sampled_states: sampled,
        c_summary: summarize(&c_coeffs),
        g_diag_summary: summarize(&g_diag),
        g_offdiag_summary: summarize(&g_off),
        c_coeffs,
        g_diag,
        g_offdiag: g_off,
        normalization_defect: norm_defect,
        completeness_defect: compl,
        completeness_triples: triples,
    })
}

// ---------------------------------------------------------- element hierarchy

#[derive(Debug, Clone, Serialize)]
pub struct ElementSample {
    pub alpha: usize,
    pub beta: usize,
    pub i: usize,
    pub j: usize,
    /// |(H^I_{αβ})_{ij}|, i ≠ j.
    pub offdiag: f64,
    /// |(H^I_{αβ})_{ii}|.
    pub diag: f64,
    /// |(H^I_{αβ})_{ii} − h^dia_{αβ}|.
    pub diag_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ElementHierarchy {
    pub n_a: usize,
    pub n_env: usize,
    pub h: f64,
    pub h_d: f64,
    /// h·N_A^{3/2}·N_E^{-1/2}.
    pub bound: f64,
    pub slack: f64,
    pub samples: Vec<ElementSample>,
    pub offdiag_summary: Summary,
    pub diag_summary: Summary,
    pub deviation_summary: Summary,
    /// Fraction of off-diagonal samples ≤ slack·bound.
    pub fraction_under_bound: f64,
    /// median |diag| / median |offdiag|; `None` when every h^dia vanishes.
    pub median_ratio: Option<f64>,
    pub hierarchy_applicable: bool,
}

/// Samples diagonal and off-diagonal elements of the interaction blocks in
/// the environment eigenbasis, i, j from the central half of the spectrum
/// and (α, β) among the blocks that are not identically zero.
pub fn element_hierarchy(
    blocks: &InteractionBlocks,
    space: &CompositeSpace,
    env: &Spectrum,
    sample_count: usize,
    seed: u64,
) -> Result<ElementHierarchy> {
    let (na, ne) = (space.n_a(), space.n_env());
    if env.len() != ne {
        return Err(Error::Shape(format!("environment spectrum of size {} on N_E = {ne}", env.len())));
    }
    if sample_count == 0 {
        return Err(Error::Validation("sample_count must be positive".into()));
    }
    let ns = blocks.n_s;
    let mut pairs: Vec<(usize, usize)> = (0..ns)
        .flat_map(|a| (0..ns).map(move |b| (a, b)))
        .filter(|&(a, b)| blocks.h_ab[[a, b]] > 0.0)
        .collect();
    if pairs.is_empty() {
        pairs.push((0, 0));
    }
    let range = central_half(ne);
    let mut r = rng::stream(seed);
    let mut samples = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let (a, b) = pairs[r.random_range(0..pairs.len())];
        let (i, j) = sample_pair(&mut r, &range);
        let off = blocks.element(space, env, a, b, i, j).norm();
        let d = blocks.element(space, env, a, b, i, i);
        samples.push(ElementSample {
            alpha: a,
            beta: b,
            i,
            j,
            offdiag: off,
            diag: d.norm(),
            diag_deviation: (d - blocks.h_dia[[a, b]]).norm(),
        });
    }
    let off: Vec<f64> = samples.iter().map(|x| x.offdiag).collect();
    let dia: Vec<f64> = samples.iter().map(|x| x.diag).collect();
    let dev: Vec<f64> = samples.iter().map(|x| x.diag_deviation).collect();
    let bound = blocks.h_max * (na as f64).powf(1.5) / (ne as f64).sqrt();
    let slack = DEFAULT_SLACK;
    let applicable = blocks.h_d > 1e-12 * blocks.h_max.max(f64::MIN_POSITIVE);
    let med_off = stats::median(&off);
    let median_ratio = (applicable && med_off > 0.0).then(|| stats::median(&dia) / med_off);
    Ok(ElementHierarchy {
        n_a: na,
        n_env: ne,
        h: blocks.h_max,
        h_d: blocks.h_d,
        bound,
        slack,
        fraction_under_bound: stats::fraction(&off, |v| v <= slack * bound),
        offdiag_summary: summarize(&off),
        diag_summary: summarize(&dia),
        deviation_summary: summarize(&dev),
        samples,
        median_ratio,
        hierarchy_applicable: applicable,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BareDiagonalRow {
    pub alpha: usize,
    pub beta: usize,
    pub gamma: usize,
    pub n_window: usize,
    pub h_ab: f64,
    pub h_dia: [f64; 2],
    /// mean and max of |(H^I_{αβ})_{ii} − h^dia_{αβ}| over the window.
    pub mean_deviation: f64,
    pub max_deviation: f64,
    /// h_{αβ}·N_A^{3/2}·N_E^{-1/2}.
    pub deviation_bound: f64,
    pub within_bound: bool,
    pub max_abs: f64,
    /// States whose |(H^I_{αβ})_{ii}| exceeds slack·N_A·h.
    pub cap_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BareDiagonalCheck {
    /// N_A·h.
    pub cap: f64,
    pub slack: f64,
    pub rows: Vec<BareDiagonalRow>,
}

impl BareDiagonalCheck {
    pub fn cap_violations(&self) -> usize {
        self.rows.iter().map(|r| r.cap_violations).sum()
    }
}

/// Exhaustive check of (H^I_{αβ})_{ii} over the environment window of
/// γ(α, β) for every block.
pub fn bare_diagonal_check(
    blocks: &InteractionBlocks,
    space: &CompositeSpace,
    env: &Spectrum,
    windows: &[EnvWindow],
) -> Result<BareDiagonalCheck> {
    let ns = blocks.n_s;
    if windows.len() != ns {
        return Err(Error::Shape(format!("{} windows for {ns} levels", windows.len())));
    }
    let (na, ne) = (space.n_a() as f64, space.n_env() as f64);
    let cap = na * blocks.h_max;
    let limit = DEFAULT_SLACK * cap;
    let mut rows = Vec::with_capacity(ns * ns);
    for a in 0..ns {
        for b in 0..ns {
            let g = gamma_index(&blocks.energies, a, b);
            let w = &windows[g];
            let hd = blocks.h_dia[[a, b]];
            let mut devs = Vec::with_capacity(w.n_members);
            let mut max_abs: f64 = 0.0;
            let mut viol = 0;
            for &i in &w.member_indices {
                let d = blocks.element(space, env, a, b, i, i);
                devs.push((d - hd).norm());
                max_abs = max_abs.max(d.norm());
                if d.norm() > limit * (1.0 + 1e-12) {
                    viol += 1;
                }
            }
            let bound = blocks.h_ab[[a, b]] * na.powf(1.5) / ne.sqrt();
            let mean_dev = if devs.is_empty() { 0.0 } else { stats::mean(&devs) };
            rows.push(BareDiagonalRow {
                alpha: a,
                beta: b,
                gamma: g,
                n_window: w.n_members,
                h_ab: blocks.h_ab[[a, b]],
                h_dia: [hd.re, hd.im],
                mean_deviation: mean_dev,
                max_deviation: devs.iter().copied().fold(0.0, f64::max),
                deviation_bound: bound,
                within_bound: mean_dev <= DEFAULT_SLACK * bound + 1e-14,
                max_abs,
                cap_violations: viol,
            });
        }
    }
    Ok(BareDiagonalCheck { cap, slack: DEFAULT_SLACK, rows })
}

// ---------------------------------------------------------- perturbative width

/// Uncoupled product basis |E^S_α⟩|E^E_i⟩ sorted by E^0 = E^S_α + E^E_i.
#[derive(Debug, Clone)]
pub struct ProductBasis {
    pub labels: Vec<(usize, usize)>,
    pub energies: Vec<f64>,
}

impl ProductBasis {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn span(&self) -> f64 {
        match (self.energies.first(), self.energies.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Index of the basis state whose energy is closest to `e`.
    pub fn nearest(&self, e: f64) -> usize {
        let p = self.energies.partition_point(|&x| x < e);
        match (p.checked_sub(1), (p < self.len()).then_some(p)) {
            (Some(lo), Some(hi)) => {
                if e - self.energies[lo] <= self.energies[hi] - e {
                    lo
                } else {
                    hi
                }
            }
            (Some(lo), None) => lo,
            (None, Some(hi)) => hi,
            (None, None) => 0,
        }
    }
}

/// Product basis restricted to E^0 ∈ [lo, hi] (everything for ±∞).
pub fn product_basis(sys: &Spectrum, env: &Spectrum, lo: f64, hi: f64) -> ProductBasis {
    let mut items: Vec<(f64, (usize, usize))> = Vec::new();
    for (a, &ea) in sys.values.iter().enumerate() {
        let from = env.values.as_slice().expect("contiguous").partition_point(|&x| ea + x < lo);
        for i in from..env.len() {
            let e = ea + env.values[i];
            if e > hi {
                break;
            }
            items.push((e, (a, i)));
        }
    }
    items.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    ProductBasis { labels: items.iter().map(|x| x.1).collect(), energies: items.iter().map(|x| x.0).collect() }
}

#[derive(Debug, Clone, Serialize)]
pub struct WidthReport {
    pub eta: usize,
    pub energy: f64,
    /// Index (into the energy-sorted product basis) of the basis state whose
    /// energy is the closest to E_η.
    pub k0: usize,
    pub k1: usize,
    pub k2: usize,
    pub eps_p: f64,
    /// δe = E^0_{k2} − E^0_{k1} of the narrowest window [k1, k2] ∋ k0 whose
    /// outside population P_{k1k2} is ≤ ε_p.
    pub measured_width: f64,
    /// δe^(1) = 4h²N_A³N_S/(ε_p ΔE).
    pub bound: f64,
    pub p_tail: f64,
    /// First-order prediction P^(1)_{k1k2} = Σ_{k∈Q} |⟨E^0_k|H^I|E^0_{k0}⟩|²/(E^0_{k0} − E^0_k)².
    pub p_tail_first_order: f64,
    pub q_set_size: usize,
    pub delta_e: f64,
    pub density_estimate: f64,
    /// Σ_k |C_{ηk}|² over the basis used.
    pub population_sum: f64,
    pub participation: f64,
}

/// Narrowest window [k1, k2] containing k0 with outside population ≤ eps_p,
/// on populations sorted by unperturbed energy. Two-pointer scan over k1.
pub fn minimal_width_window(p: &[f64], e0: &[f64], k0: usize, eps_p: f64) -> (usize, usize, f64, f64) {
    let n = p.len();
    let mut c = Vec::with_capacity(n + 1);
    c.push(0.0);
    for &x in p {
        c.push(c.last().unwrap() + x);
    }
    let total = c[n];
    let mut best = (k0, k0, f64::INFINITY, total - p[k0]);
    let mut j = k0;
    for i in (0..=k0).rev() {
        // j only moves left as i moves left.
        while j > k0 && total - (c[j] - c[i]) <= eps_p {
            j -= 1;
        }
        while j < n && total - (c[j + 1] - c[i]) > eps_p {
            j += 1;
        }
        if j == n {
            continue;
        }
        let w = e0[j] - e0[i];
        if w < best.2 || (w == best.2 && j - i < best.1 - best.0) {
            best = (i, j, w, total - (c[j + 1] - c[i]));
        }
    }
    if !best.2.is_finite() {
        best = (0, n - 1, e0[n - 1] - e0[0], 0.0);
    }
    best
}

fn check_eps_p(eps_p: f64) -> Result<()> {
    if !(eps_p > 0.0 && eps_p < 1.0) {
        return Err(Error::Validation(format!("eps_p = {eps_p} outside (0, 1)")));
    }
    Ok(())
}

/// ⟨E^S_β E^E_j|H^I|E^S_{α0} E^E_{i0}⟩ for every (β, j), indexed β·N_E + j.
fn coupling_column(blocks: &InteractionBlocks, space: &CompositeSpace, env: &Spectrum, a0: usize, i0: usize) -> Vec<C64> {
    let (na, nb, ne) = (space.n_a(), space.n_b(), space.n_env());
    let v0 = env.vectors.column(i0);
    // X[m][j] = Σ_q conj(V[m·nb+q, j]) V[m'·nb+q, i0], assembled per (m, m').
    let mut out = vec![ZERO; blocks.n_s * ne];
    let mut g: Vec<Vec<Array1<C64>>> = Vec::with_capacity(na);
    for m in 0..na {
        let vm = env.vectors.slice(s![m * nb..(m + 1) * nb, ..]);
        let mut row = Vec::with_capacity(na);
        for m2 in 0..na {
            let tail = v0.slice(s![m2 * nb..(m2 + 1) * nb]);
            row.push(vm.t().mapv(|z| z.conj()).dot(&tail));
        }
        g.push(row);
    }
    for b in 0..blocks.n_s {
        let blk = blocks.block(b, a0);
        for m in 0..na {
            for m2 in 0..na {
                let w = blk[[m, m2]];
                if w == ZERO {
                    continue;
                }
                for j in 0..ne {
                    out[b * ne + j] += w * g[m][m2][j];
                }
            }
        }
    }
    out
}

fn width_report(
    eta: usize,
    energy: f64,
    basis: &ProductBasis,
    populations: &[f64],
    column: &[C64],
    n_env: usize,
    delta_e: f64,
    blocks: &InteractionBlocks,
    space: &CompositeSpace,
    eps_p: f64,
) -> WidthReport {
    let k0 = basis.nearest(energy);
    let (k1, k2, w, tail) = minimal_width_window(populations, &basis.energies, k0, eps_p);
    let e_k0 = basis.energies[k0];
    let mut first = 0.0;
    for (k, &(b, j)) in basis.labels.iter().enumerate() {
        if k >= k1 && k <= k2 {
            continue;
        }
        let d = e_k0 - basis.energies[k];
        if d != 0.0 {
            first += column[b * n_env + j].norm_sqr() / (d * d);
        }
    }
    let (na, ns) = (space.n_a() as f64, space.n_s() as f64);
    WidthReport {
        eta,
        energy,
        k0,
        k1,
        k2,
        eps_p,
        measured_width: w,
        bound: 4.0 * blocks.h_max.powi(2) * na.powi(3) * ns / (eps_p * delta_e),
        p_tail: tail,
        p_tail_first_order: first,
        q_set_size: basis.len() - (k2 - k1 + 1),
        delta_e,
        density_estimate: ns * space.n_env() as f64 / delta_e,
        population_sum: populations.iter().sum(),
        participation: participation_ratio(populations.iter().copied()),
    }
}

/// Widths of the total eigenstates `etas` from full exact diagonalization.
/// ΔE is the span of the uncoupled spectrum.
pub fn perturbative_widths(
    hs: &HamiltonianSet,
    total: &Spectrum,
    sys: &Spectrum,
    env: &Spectrum,
    etas: &[usize],
    eps_p: f64,
) -> Result<Vec<WidthReport>> {
    check_eps_p(eps_p)?;
    if let Some(&bad) = etas.iter().find(|&&e| e >= total.len()) {
        return Err(Error::Range { what: "eigenstate", index: bad, bound: total.len() });
    }
    let space = &hs.space;
    let ne = space.n_env();
    let basis = product_basis(sys, env, f64::NEG_INFINITY, f64::INFINITY);
    let delta_e = basis.span();
    let blocks = crate::renorm::interaction_blocks(hs, sys)?;
    let f = ensembles::product_expansion(space, total, etas, sys, env)?;
    let mut out = Vec::with_capacity(etas.len());
    for (r, &eta) in etas.iter().enumerate() {
        let pops: Vec<f64> = basis.labels.iter().map(|&(a, i)| f[[r, a * ne + i]].norm_sqr()).collect();
        let k0 = basis.nearest(total.values[eta]);
        let (a0, i0) = basis.labels[k0];
        let col = coupling_column(&blocks, space, env, a0, i0);
        out.push(width_report(eta, total.values[eta], &basis, &pops, &col, ne, delta_e, &blocks, space, eps_p));
    }
    Ok(out)
}

pub fn perturbative_width(
    hs: &HamiltonianSet,
    total: &Spectrum,
    sys: &Spectrum,
    env: &Spectrum,
    eta: usize,
    eps_p: f64,
) -> Result<WidthReport> {
    Ok(perturbative_widths(hs, total, sys, env, &[eta], eps_p)?.remove(0))
}

/// Exact diagonalization of H restricted to the uncoupled product states
/// with E^0 in [lo, hi]. Eigenvectors are expressed in `basis`.
#[derive(Debug, Clone)]
pub struct WindowedEd {
    pub basis: ProductBasis,
    pub spectrum: Spectrum,
    pub lo: f64,
    pub hi: f64,
    /// Span of the full uncoupled spectrum.
    pub delta_e: f64,
}

pub fn windowed_ed(hs: &HamiltonianSet, sys: &Spectrum, env: &Spectrum, lo: f64, hi: f64) -> Result<WindowedEd> {
    let space = &hs.space;
    let (na, nb) = (space.n_a(), space.n_b());
    let full = product_basis(sys, env, f64::NEG_INFINITY, f64::INFINITY);
    let delta_e = full.span();
    drop(full);
    let basis = product_basis(sys, env, lo, hi);
    if basis.is_empty() {
        return Err(Error::EmptyWindow { lo, hi, context: Some("windowed diagonalization".into()) });
    }
    let n = basis.len();
    let blocks = crate::renorm::interaction_blocks(hs, sys)?;
    let ns = blocks.n_s;
    // Positions of each level's members in the basis.
    let mut by_level: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); ns];
    for (k, &(a, i)) in basis.labels.iter().enumerate() {
        by_level[a].0.push(k);
        by_level[a].1.push(i);
    }
    let real = env.vectors.iter().all(|z| z.im == 0.0);
    let gather = |idx: &[usize], m: usize| -> Op {
        Array2::from_shape_fn((nb, idx.len()), |(q, c)| env.vectors[[m * nb + q, idx[c]]])
    };
    let mut h = Array2::<C64>::zeros((n, n));
    for a in 0..ns {
        if by_level[a].0.is_empty() {
            continue;
        }
        for b in a..ns {
            if by_level[b].0.is_empty() {
                continue;
            }
            let (ka, ia) = &by_level[a];
            let (kb, ib) = &by_level[b];
            let blk = blocks.block(a, b);
            let mut acc = Array2::<C64>::zeros((ia.len(), ib.len()));
            for m in 0..na {
                let wa = gather(ia, m);
                for m2 in 0..na {
                    let w = blk[[m, m2]];
                    if w == ZERO {
                        continue;
                    }
                    let wb = gather(ib, m2);
                    let g = if real {
                        let ra = wa.mapv(|z| z.re);
                        let rb = wb.mapv(|z| z.re);
                        ra.t().dot(&rb).mapv(|x| C64::new(x, 0.0))
                    } else {
                        wa.t().mapv(|z| z.conj()).dot(&wb)
                    };
                    acc.scaled_add(w, &g);
                }
            }
            for (r, &k) in ka.iter().enumerate() {
                for (c, &l) in kb.iter().enumerate() {
                    h[[k, l]] += acc[[r, c]];
                    if a != b {
                        h[[l, k]] += acc[[r, c]].conj();
                    }
                }
            }
        }
    }
    for k in 0..n {
        h[[k, k]] += basis.energies[k];
    }
    let spectrum = diagonalize(&linalg::hermitize(&h))?;
    Ok(WindowedEd { basis, spectrum, lo, hi, delta_e })
}

/// Widths of eigenstates of a windowed diagonalization; `etas` index
/// `ed.spectrum`. Populations outside the window are taken as zero.
pub fn perturbative_widths_windowed(
    hs: &HamiltonianSet,
    ed: &WindowedEd,
    sys: &Spectrum,
    env: &Spectrum,
    etas: &[usize],
    eps_p: f64,
) -> Result<Vec<WidthReport>> {
    check_eps_p(eps_p)?;
    if let Some(&bad) = etas.iter().find(|&&e| e >= ed.spectrum.len()) {
        return Err(Error::Range { what: "windowed eigenstate", index: bad, bound: ed.spectrum.len() });
    }
    let blocks = crate::renorm::interaction_blocks(hs, sys)?;
    let ne = hs.space.n_env();
    let mut out = Vec::with_capacity(etas.len());
    for &eta in etas {
        let e = ed.spectrum.values[eta];
        let pops: Vec<f64> = ed.spectrum.vectors.column(eta).iter().map(|z| z.norm_sqr()).collect();
        let (a0, i0) = ed.basis.labels[ed.basis.nearest(e)];
        let col = coupling_column(&blocks, &hs.space, env, a0, i0);
        out.push(width_report(eta, e, &ed.basis, &pops, &col, ne, ed.delta_e, &blocks, &hs.space, eps_p));
    }
    Ok(out)
}

/// Eigenstate indices whose energies are closest to `count` targets evenly
/// spaced over [lo, hi], without repeats.
pub fn states_near_energies(values: &[f64], lo: f64, hi: f64, count: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(count);
    for k in 0..count {
        let t = if count == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (count - 1) as f64 };
        let p = values.partition_point(|&x| x < t);
        let cand = [p.checked_sub(1), (p < values.len()).then_some(p)];
        if let Some(best) = cand.iter().flatten().copied().min_by(|&x, &y| (values[x] - t).abs().total_cmp(&(values[y] - t).abs())) {
            if !out.contains(&best) {
                out.push(best);
            }
        }
    }
    out
}

// ------------------------------------------------------------------------ ETH

#[derive(Debug, Clone, Serialize)]
pub struct EthReport {
    pub lo: f64,
    pub hi: f64,
    pub observable_label: String,
    pub member_indices: Vec<usize>,
    pub per_state_expectations: Vec<f64>,
    pub window_mean: f64,
    pub window_stddev: f64,
    pub eth_flag: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EthScan {
    pub observable_label: String,
    pub observable_span: f64,
    pub threshold: f64,
    pub reports: Vec<EthReport>,
    /// Longest contiguous run of passing windows (inclusive report indices),
    /// the candidate H^(E)_ETH.
    pub eth_region: Option<(usize, usize)>,
}

impl EthScan {
    pub fn n_flagged(&self) -> usize {
        self.reports.iter().filter(|r| r.eth_flag).count()
    }

    pub fn n_failed(&self) -> usize {
        self.reports.len() - self.n_flagged()
    }
}

/// ⟨E^E_i|O|E^E_i⟩ for every environment eigenstate; O acts on A or on the
/// whole environment.
pub fn env_expectations(space: &CompositeSpace, env: &Spectrum, op: &Op) -> Result<Vec<f64>> {
    let dim = linalg::check_square(op, "observable")?;
    if dim == space.n_a() {
        Ok((0..env.len())
            .map(|i| {
                let v = env.vectors.column(i);
                space.a_matrix_element(op, &v, &v).re
            })
            .collect())
    } else if dim == space.n_env() {
        Ok(env.expectations(op))
    } else {
        Err(Error::Shape(format!("observable of dimension {dim}")))
    }
}

/// Sliding windows [E_min + k·stride, E_min + k·stride + width] over the
/// environment spectrum with per-window mean and stddev of ⟨O⟩.
pub fn eth_scan(
    space: &CompositeSpace,
    env: &Spectrum,
    observable: &Op,
    label: &str,
    window_width: f64,
    stride: f64,
    threshold: f64,
) -> Result<EthScan> {
    if !(window_width > 0.0 && stride > 0.0) {
        return Err(Error::Validation("window width and stride must be positive".into()));
    }
    let scale = linalg::max_abs(&observable.view()).max(1.0);
    if linalg::hermitian_defect(observable) > 1e-10 * scale {
        return Err(Error::Validation(format!("observable {label} is not Hermitian")));
    }
    let ev = linalg::eigvalsh(observable)?;
    let span = ev[ev.len() - 1] - ev[0];
    let x = env_expectations(space, env, observable)?;
    let values = env.values.as_slice().expect("contiguous");
    let (emin, emax) = (env.min(), env.max());
    let mut reports = Vec::new();
    let mut k = 0usize;
    loop {
        let lo = emin + k as f64 * stride;
        if lo > emax || (k > 0 && lo + window_width > emax + stride) {
            break;
        }
        let hi = lo + window_width;
        let a = values.partition_point(|&e| e < lo);
        let b = values.partition_point(|&e| e <= hi);
        let per: Vec<f64> = x[a..b].to_vec();
        let (mean, sd) = if per.is_empty() { (f64::NAN, f64::NAN) } else { (stats::mean(&per), stats::std(&per)) };
        reports.push(EthReport {
            lo,
            hi,
            observable_label: label.to_string(),
            member_indices: (a..b).collect(),
            eth_flag: per.len() >= 2 && sd <= threshold * span,
            per_state_expectations: per,
            window_mean: mean,
            window_stddev: sd,
        });
        k += 1;
    }
    let mut region: Option<(usize, usize)> = None;
    let mut start = None;
    for (idx, r) in reports.iter().enumerate() {
        match (r.eth_flag, start) {
            (true, None) => start = Some(idx),
            (false, Some(s0)) => {
                if region.is_none_or(|(a, b)| idx - 1 - s0 > b - a) {
                    region = Some((s0, idx - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        let e = reports.len() - 1;
        if region.is_none_or(|(a, b)| e - s0 > b - a) {
            region = Some((s0, e));
        }
    }
    Ok(EthScan { observable_label: label.to_string(), observable_span: span, threshold, reports, eth_region: region })
}

// ------------------------------------------------------------ typical states

#[derive(Debug, Clone, Serialize)]
pub struct TypicalCheckRow {
    pub alpha: usize,
    pub measured: f64,
    pub expected: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TypicalCheck {
    pub skipped: Option<String>,
    pub n_window: usize,
    pub n_major: f64,
    pub rel_tol: f64,
    pub diagonals: Vec<TypicalCheckRow>,
    pub max_offdiag: f64,
    /// c·N_δE^{-1/2}.
    pub offdiag_bound: f64,
    pub diag_pass: bool,
    pub offdiag_pass: bool,
}

impl TypicalCheck {
    pub fn pass(&self) -> bool {
        self.skipped.is_some() || (self.diag_pass && self.offdiag_pass)
    }
}

/// Compares (ρ^S)_{αα} in the H^S eigenbasis with N^(E)_α/N_δE and the
/// off-diagonals with c·N_δE^{-1/2}. `windows[α]` is the environment window
/// of level α for the same total-energy shell.
pub fn typical_offdiag_check(report: &TypicalStateReport, windows: &[EnvWindow], rel_tol: f64, c: f64) -> Result<TypicalCheck> {
    let rho = report.rho_eigen.matrix();
    let ns = rho.nrows();
    if windows.len() != ns {
        return Err(Error::Shape(format!("{} windows for {ns} levels", windows.len())));
    }
    let n = report.n_window;
    if n <= 1 {
        return Ok(TypicalCheck {
            skipped: Some("window holds a single eigenstate: the reduced state is that of a pure state".into()),
            n_window: n,
            n_major: report.n_major,
            rel_tol,
            diagonals: Vec::new(),
            max_offdiag: 0.0,
            offdiag_bound: c,
            diag_pass: true,
            offdiag_pass: true,
        });
    }
    let diagonals: Vec<TypicalCheckRow> = (0..ns)
        .map(|a| {
            let expected = windows[a].n_members as f64 / n as f64;
            let measured = rho[[a, a]].re;
            let relative_error = if expected > 0.0 { (measured - expected).abs() / expected } else { measured.abs() };
            TypicalCheckRow { alpha: a, measured, expected, relative_error }
        })
        .collect();
    let mut max_off: f64 = 0.0;
    for a in 0..ns {
        for b in 0..ns {
            if a != b {
                max_off = max_off.max(rho[[a, b]].norm());
            }
        }
    }
    let bound = c / (n as f64).sqrt();
    Ok(TypicalCheck {
        skipped: None,
        n_window: n,
        n_major: report.n_major,
        rel_tol,
        diag_pass: diagonals.iter().all(|r| r.relative_error <= rel_tol),
        diagonals,
        max_offdiag: max_off,
        offdiag_bound: bound,
        offdiag_pass: max_off <= bound,
    })
}

// --------------------------------------------------------------------- export

/// Flat CSV view of a report: one row per sample or window.
pub trait CsvRows {
    fn header(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
}

pub fn write_csv<W: Write>(out: W, report: &impl CsvRows) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(report.header())?;
    for r in report.rows() {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, report: &impl CsvRows) -> Result<()> {
    write_csv(std::fs::File::create(path)?, report)
}

pub fn write_json_file(path: &Path, report: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn f(x: f64) -> String {
    crate::kv::fmt_f64(x)
}

impl CsvRows for GStats {
    fn header(&self) -> Vec<&'static str> {
        vec!["class", "value"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        let tag = |name: &str, v: &[f64]| v.iter().map(|x| vec![name.to_string(), f(*x)]).collect::<Vec<_>>();
        let mut rows = tag("c_abs", &self.c_coeffs);
        rows.extend(tag("g_diag", &self.g_diag));
        rows.extend(tag("g_offdiag_abs", &self.g_offdiag));
        rows
    }
}

impl CsvRows for ElementHierarchy {
    fn header(&self) -> Vec<&'static str> {
        vec!["alpha", "beta", "i", "j", "offdiag_abs", "diag_abs", "diag_deviation"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        self.samples
            .iter()
            .map(|x| {
                vec![x.alpha.to_string(), x.beta.to_string(), x.i.to_string(), x.j.to_string(), f(x.offdiag), f(x.diag), f(x.diag_deviation)]
            })
            .collect()
    }
}

impl CsvRows for Vec<WidthReport> {
    fn header(&self) -> Vec<&'static str> {
        vec!["eta", "energy", "k0", "k1", "k2", "eps_p", "measured_width", "bound", "p_tail", "p_tail_first_order", "q_set_size", "delta_e", "density_estimate", "participation"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|w| {
                vec![
                    w.eta.to_string(),
                    f(w.energy),
                    w.k0.to_string(),
                    w.k1.to_string(),
                    w.k2.to_string(),
                    f(w.eps_p),
                    f(w.measured_width),
                    f(w.bound),
                    f(w.p_tail),
                    f(w.p_tail_first_order),
                    w.q_set_size.to_string(),
                    f(w.delta_e),
                    f(w.density_estimate),
                    f(w.participation),
                ]
            })
            .collect()
    }
}

impl CsvRows for EthScan {
    fn header(&self) -> Vec<&'static str> {
        vec!["lo", "hi", "observable", "n_members", "mean", "stddev", "eth_flag"]
    }
    fn rows(&self) -> Vec<Vec<String>> {
        self.reports
            .iter()
            .map(|r| {
                vec![f(r.lo), f(r.hi), r.observable_label.clone(), r.member_indices.len().to_string(), f(r.window_mean), f(r.window_stddev), r.eth_flag.to_string()]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, identity};
    use crate::models::{build_model, ModelSpec};
    use crate::renorm::interaction_blocks;
    use crate::spectra::env_windows;

    fn model(eps: f64, n_b: usize) -> (HamiltonianSet, Spectrum, Spectrum) {
        let hs = build_model(&ModelSpec { epsilon: eps, ..ModelSpec::chaotic(n_b) }).unwrap();
        let sys = diagonalize(&hs.h_s).unwrap();
        let env = diagonalize(&hs.h_env).unwrap();
        (hs, sys, env)
    }

    #[test]
    fn g_identities_hold() {
        let (hs, _, env) = model(0.1, 5);
        let g = g_statistics(&env, &hs.space, 40, 3).unwrap();
        assert!(g.normalization_defect < 1e-12);
        assert!(g.completeness_defect < 1e-12);
        assert_eq!(g.g_diag.len(), 80);
        assert!((g.diag_ratio() - 1.0).abs() < 0.3);
    }

    #[test]
    fn zero_coupling_elements_vanish() {
        let (hs, sys, env) = model(0.0, 3);
        let b = interaction_blocks(&hs, &sys).unwrap();
        let h = element_hierarchy(&b, &hs.space, &env, 20, 1).unwrap();
        assert!(h.samples.iter().all(|x| x.offdiag == 0.0 && x.diag == 0.0));
        assert!(!h.hierarchy_applicable);
        assert!(h.median_ratio.is_none());
    }

    #[test]
    fn identity_block_diagonal_is_exact() {
        // H^I = ε σx_S ⊗ 1_A: every block is a multiple of the identity.
        let spec = ModelSpec { epsilon: 0.2, interaction_terms: vec![("x".into(), "1".into())], ..ModelSpec::chaotic(3) };
        let hs = build_model(&spec).unwrap();
        let sys = diagonalize(&hs.h_s).unwrap();
        let env = diagonalize(&hs.h_env).unwrap();
        let b = interaction_blocks(&hs, &sys).unwrap();
        let ws = env_windows(&env, &[sys.values[0], sys.values[1]], env.values[5] + sys.values[1], 2.0).unwrap();
        let chk = bare_diagonal_check(&b, &hs.space, &env, &ws).unwrap();
        for r in &chk.rows {
            assert!(r.max_deviation < 1e-14, "{r:?}");
        }
        assert_eq!(chk.cap_violations(), 0);
    }

    #[test]
    fn diagonal_cap_holds() {
        let (hs, sys, env) = model(0.3, 4);
        let b = interaction_blocks(&hs, &sys).unwrap();
        let ws = env_windows(&env, &[sys.values[0], sys.values[1]], env.values[10] + sys.values[1], 3.0).unwrap();
        let chk = bare_diagonal_check(&b, &hs.space, &env, &ws).unwrap();
        assert_eq!(chk.cap_violations(), 0);
    }

    #[test]
    fn minimal_window_cases() {
        let e = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(minimal_width_window(&[0.0, 0.0, 1.0, 0.0, 0.0], &e, 2, 0.01), (2, 2, 0.0, 0.0));
        let (k1, k2, w, t) = minimal_width_window(&[0.1, 0.0, 0.5, 0.4, 0.0], &e, 2, 0.15);
        assert_eq!((k1, k2, w), (2, 3, 1.0));
        assert!((t - 0.1).abs() < 1e-15);
        let (k1, k2, _, _) = minimal_width_window(&[0.3, 0.0, 0.4, 0.0, 0.3], &e, 2, 0.01);
        assert_eq!((k1, k2), (0, 4));
    }

    fn brute_window(p: &[f64], e: &[f64], k0: usize, eps: f64) -> f64 {
        let total: f64 = p.iter().sum();
        let mut best = f64::INFINITY;
        for i in 0..=k0 {
            for j in k0..p.len() {
                let inside: f64 = p[i..=j].iter().sum();
                if total - inside <= eps {
                    best = best.min(e[j] - e[i]);
                }
            }
        }
        best
    }

    #[test]
    fn minimal_window_matches_brute_force() {
        let mut r = rng::stream(9);
        for _ in 0..200 {
            let n = r.random_range(1..12);
            let mut p: Vec<f64> = (0..n).map(|_| r.random::<f64>().powi(3)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            let mut e: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 10.0).collect();
            e.sort_by(f64::total_cmp);
            let k0 = r.random_range(0..n);
            let eps = r.random::<f64>() * 0.5;
            let (_, _, w, t) = minimal_width_window(&p, &e, k0, eps);
            assert!((w - brute_window(&p, &e, k0, eps)).abs() < 1e-12);
            assert!(t <= eps + 1e-12);
        }
    }

    #[test]
    fn zero_coupling_width_is_zero() {
        let (hs, sys, env) = model(0.0, 3);
        let total = diagonalize(&hs.h_total()).unwrap();
        let ws = perturbative_widths(&hs, &total, &sys, &env, &[3, 10, 20], 0.01).unwrap();
        for w in ws {
            assert_eq!(w.measured_width, 0.0);
            assert!((w.population_sum - 1.0).abs() < 1e-10);
            assert_eq!(w.p_tail_first_order, 0.0);
        }
        assert!(matches!(perturbative_width(&hs, &total, &sys, &env, 0, 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn width_report_is_consistent() {
        let (hs, sys, env) = model(0.05, 4);
        let total = diagonalize(&hs.h_total()).unwrap();
        let w = perturbative_width(&hs, &total, &sys, &env, 32, 0.05).unwrap();
        assert!(w.p_tail <= 0.05 + 1e-12);
        assert!(w.measured_width >= 0.0);
        assert!((w.population_sum - 1.0).abs() < 1e-10);
        assert_eq!(w.q_set_size, 64 - (w.k2 - w.k1 + 1));
    }

    #[test]
    fn coupling_column_matches_direct_elements() {
        let (hs, sys, env) = model(0.2, 3);
        let b = interaction_blocks(&hs, &sys).unwrap();
        let col = coupling_column(&b, &hs.space, &env, 1, 4);
        let ne = hs.space.n_env();
        for (bb, j) in [(0, 0), (0, 7), (1, 4), (1, 15)] {
            let want = b.element(&hs.space, &env, bb, 1, j, 4);
            assert!((col[bb * ne + j] - want).norm() < 1e-13);
        }
    }

    #[test]
    fn windowed_ed_matches_full_ed() {
        let (hs, sys, env) = model(0.03, 5);
        let total = diagonalize(&hs.h_total()).unwrap();
        let full = product_basis(&sys, &env, f64::NEG_INFINITY, f64::INFINITY);
        let mid = 0.5 * (full.energies[0] + full.energies[full.len() - 1]);
        let ed = windowed_ed(&hs, &sys, &env, mid - 3.0, mid + 3.0).unwrap();
        let inner: Vec<usize> = (0..ed.spectrum.len()).filter(|&k| (ed.spectrum.values[k] - mid).abs() < 1.0).collect();
        assert!(inner.len() > 5);
        for &k in &inner {
            let e = ed.spectrum.values[k];
            let near = total.values.iter().map(|x| (x - e).abs()).fold(f64::INFINITY, f64::min);
            assert!(near < 1e-4, "level {e} off by {near}");
        }
        // The whole space reproduces full ED exactly.
        let all = windowed_ed(&hs, &sys, &env, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        let d = (&all.spectrum.values - &total.values).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(d < 1e-11);
        let etas = states_near_energies(total.values.as_slice().unwrap(), mid - 0.5, mid + 0.5, 4);
        let a = perturbative_widths(&hs, &total, &sys, &env, &etas, 0.02).unwrap();
        let b = perturbative_widths_windowed(&hs, &all, &sys, &env, &etas, 0.02).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.measured_width - y.measured_width).abs() < 1e-9);
            assert!((x.p_tail_first_order - y.p_tail_first_order).abs() < 1e-9 * (1.0 + x.p_tail_first_order));
        }
    }

    #[test]
    fn states_near_energies_picks_closest() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(states_near_energies(&v, 0.9, 2.2, 2), vec![1, 2]);
        assert_eq!(states_near_energies(&v, 1.0, 1.1, 3), vec![1]);
    }

    #[test]
    fn eth_identity_and_shift() {
        let (hs, _, env) = model(0.1, 5);
        let scan = eth_scan(&hs.space, &env, &identity(2), "1", 1.0, 0.5, 0.05).unwrap();
        assert!(scan.reports.iter().all(|r| r.per_state_expectations.is_empty() || r.window_stddev < 1e-14));
        let n = crate::models::pauli_product(1, &[(0, crate::models::Pauli::N)]).unwrap();
        let a = eth_scan(&hs.space, &env, &n, "n", 1.0, 0.5, 0.05).unwrap();
        let shifted = Spectrum { values: env.values.mapv(|x| x + 7.25), vectors: env.vectors.clone() };
        let b = eth_scan(&hs.space, &shifted, &n, "n", 1.0, 0.5, 0.05).unwrap();
        assert_eq!(a.reports.len(), b.reports.len());
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(x.member_indices, y.member_indices);
            assert!((x.window_stddev - y.window_stddev).abs() < 1e-12 || x.member_indices.is_empty());
            let m = stats::mean(&x.per_state_expectations);
            assert!(x.member_indices.is_empty() || (m - x.window_mean).abs() < 1e-12);
        }
        let bad = Op::from_shape_vec((2, 2), vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!(eth_scan(&hs.space, &env, &bad, "bad", 1.0, 0.5, 0.05).is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_sample() {
        let (hs, sys, env) = model(0.1, 3);
        let b = interaction_blocks(&hs, &sys).unwrap();
        let h = element_hierarchy(&b, &hs.space, &env, 7, 2).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &h).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 8);
    }
}
