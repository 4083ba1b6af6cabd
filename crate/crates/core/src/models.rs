//! Spin-chain realizations of the `S + A + B` setting.
//!
//! The chain is laid out as `[S spins][A spins][B spins]`. The system
//! Hamiltonian is a set of Zeeman terms with distinct splittings, the
//! environment is a disordered Ising chain on `A ∪ B` with optional
//! next-nearest-neighbour exchange and transverse field, and the interaction
//! couples S spins to A spins only:
//!
//! ```text
//! H^S = Σ_s (Δ_s / 2) σ^z_s,            Δ_s = system_field · (1 + s/2)
//! H^E = Σ J_nn σ^z_j σ^z_{j+1} + Σ J_nnn σ^z_j σ^z_{j+2}
//!     + Σ (h_x + δx_j) σ^x_j + Σ (h_z + δz_j) σ^z_j
//! H^I = ε Σ_l J^S_l ⊗ J^A_l
//! ```
//!
//! Random offsets δ are uniform in `[-W, W]` and only added to field
//! components whose base value is nonzero, so switching off the transverse
//! field yields a classical (integrable) chain.
//!
//! Spins are big-endian within each register and `|0⟩` is spin up
//! (σ^z = +1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::CompositeSpace;
use crate::kv::{self, Entry};
use crate::linalg::{self, c, hermitian_defect, kron, max_abs_diff, Op, C64, ONE, ZERO};
use crate::rng;

/// Minimum level spacing of H^S; anything closer counts as degenerate.
pub const GAP_THRESHOLD: f64 = 1e-10;

/// Default cap on the total dimension (2^14).
pub const DEFAULT_DIM_CAP: usize = 1 << 14;

const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
    /// Projector on spin up, (1 + σ^z)/2.
    N,
}

impl Pauli {
    /// Image of basis bit `bit` as (flipped?, amplitude).
    fn act(self, bit: bool) -> (bool, C64) {
        match (self, bit) {
            (Pauli::X, _) => (true, ONE),
            (Pauli::Y, false) => (true, c(0.0, 1.0)),
            (Pauli::Y, true) => (true, c(0.0, -1.0)),
            (Pauli::Z, false) => (false, ONE),
            (Pauli::Z, true) => (false, -ONE),
            (Pauli::N, false) => (false, ONE),
            (Pauli::N, true) => (false, ZERO),
        }
    }
}

/// One factor of a Pauli-string label; `site` is `None` for the register's
/// default site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteOp {
    pub site: Option<usize>,
    pub kind: Pauli,
}

/// Parse labels such as `x`, `z0`, `x0z1`, `n`. The label `1` is the
/// identity (empty product).
pub fn parse_label(label: &str) -> Result<Vec<SiteOp>> {
    let s = label.trim();
    if s == "1" {
        return Ok(Vec::new());
    }
    let bad = || Error::config(format!("bad operator label `{label}`"));
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(ch) = chars.next() {
        let kind = match ch.to_ascii_lowercase() {
            'x' => Pauli::X,
            'y' => Pauli::Y,
            'z' => Pauli::Z,
            'n' => Pauli::N,
            _ => return Err(bad()),
        };
        let mut digits = String::new();
        while let Some(d) = chars.peek().filter(|d| d.is_ascii_digit()) {
            digits.push(*d);
            chars.next();
        }
        let site = if digits.is_empty() { None } else { Some(digits.parse().map_err(|_| bad())?) };
        out.push(SiteOp { site, kind });
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Dense operator of a product of single-site operators on `n_spins` spins.
pub fn pauli_product(n_spins: usize, ops: &[(usize, Pauli)]) -> Result<Op> {
    for &(site, _) in ops {
        if site >= n_spins {
            return Err(Error::Range { what: "spin site", index: site, bound: n_spins });
        }
    }
    let dim = 1usize << n_spins;
    let mut m = Op::zeros((dim, dim));
    for k in 0..dim {
        let mut to = k;
        let mut amp = ONE;
        // Apply right-to-left so that the written order is operator order.
        for &(site, p) in ops.iter().rev() {
            let mask = 1usize << (n_spins - 1 - site);
            let (flip, a) = p.act(to & mask != 0);
            amp *= a;
            if flip {
                to ^= mask;
            }
        }
        if amp != ZERO {
            m[[to, k]] += amp;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvCouplings {
    pub j_nn: f64,
    pub j_nnn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvFields {
    pub x: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_spins_s: usize,
    pub n_spins_a: usize,
    pub n_spins_b: usize,
    pub epsilon: f64,
    pub system_field: f64,
    /// (J^S label, J^A label) pairs.
    pub interaction_terms: Vec<(String, String)>,
    pub env_couplings: EnvCouplings,
    pub env_fields: EnvFields,
    pub disorder_width: f64,
    pub seed: u64,
    pub dim_cap: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::chaotic(8)
    }
}

impl ModelSpec {
    /// Disordered Ising chain with transverse field and next-nearest
    /// exchange; level statistics in the bulk are GOE-like.
    pub fn chaotic(n_spins_b: usize) -> Self {
        Self {
            n_spins_s: 1,
            n_spins_a: 1,
            n_spins_b,
            epsilon: 0.05,
            system_field: 1.0,
            interaction_terms: vec![("x".into(), "n".into())],
            env_couplings: EnvCouplings { j_nn: 1.0, j_nnn: 0.3 },
            env_fields: EnvFields { x: 0.9, z: 0.5 },
            disorder_width: 0.3,
            seed: 1,
            dim_cap: DEFAULT_DIM_CAP,
        }
    }

    /// Nearest-neighbour Ising chain in a random longitudinal field; the
    /// Hamiltonian is diagonal in the product basis and its level
    /// statistics are Poisson-like.
    pub fn integrable(n_spins_b: usize) -> Self {
        Self {
            env_couplings: EnvCouplings { j_nn: 1.0, j_nnn: 0.0 },
            env_fields: EnvFields { x: 0.0, z: 0.5 },
            ..Self::chaotic(n_spins_b)
        }
    }

    pub fn preset(name: &str, n_spins_b: usize) -> Result<Self> {
        match name {
            "chaotic" => Ok(Self::chaotic(n_spins_b)),
            "integrable" => Ok(Self::integrable(n_spins_b)),
            _ => Err(Error::config(format!("unknown preset `{name}`"))),
        }
    }

    pub fn n_env_spins(&self) -> usize {
        self.n_spins_a + self.n_spins_b
    }

    pub fn space(&self) -> Result<CompositeSpace> {
        let bits = self.n_spins_s + self.n_spins_a + self.n_spins_b;
        if bits >= usize::BITS as usize - 1 {
            return Err(Error::Resource { dim: usize::MAX, cap: self.dim_cap });
        }
        CompositeSpace::new(1 << self.n_spins_s, 1 << self.n_spins_a, 1 << self.n_spins_b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_spins_s == 0 || self.n_spins_a == 0 || self.n_spins_b == 0 {
            return Err(Error::Validation("every register needs at least one spin".into()));
        }
        let finite = [
            self.epsilon,
            self.system_field,
            self.env_couplings.j_nn,
            self.env_couplings.j_nnn,
            self.env_fields.x,
            self.env_fields.z,
            self.disorder_width,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("model parameters must be finite".into()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Validation(format!("epsilon = {} is negative", self.epsilon)));
        }
        if self.disorder_width < 0.0 {
            return Err(Error::Validation("disorder_width is negative".into()));
        }
        let space = self.space()?;
        if space.n_tot() > self.dim_cap {
            return Err(Error::Resource { dim: space.n_tot(), cap: self.dim_cap });
        }
        for (ls, la) in &self.interaction_terms {
            resolve_sites(&parse_label(ls)?, self.n_spins_s, self.n_spins_s - 1)?;
            resolve_sites(&parse_label(la)?, self.n_spins_a, 0)?;
        }
        Ok(())
    }

    /// Per-site (transverse, longitudinal) fields on A ∪ B after disorder.
    pub fn site_fields(&self) -> (Vec<f64>, Vec<f64>) {
        let mut r = rng::stream(self.seed);
        let n = self.n_env_spins();
        let mut hx = Vec::with_capacity(n);
        let mut hz = Vec::with_capacity(n);
        for _ in 0..n {
            let dx = rng::uniform_sym(&mut r, self.disorder_width);
            let dz = rng::uniform_sym(&mut r, self.disorder_width);
            hx.push(if self.env_fields.x != 0.0 { self.env_fields.x + dx } else { 0.0 });
            hz.push(if self.env_fields.z != 0.0 { self.env_fields.z + dz } else { 0.0 });
        }
        (hx, hz)
    }

    /// Level splittings Δ_s of the system register.
    pub fn system_splittings(&self) -> Vec<f64> {
        (0..self.n_spins_s).map(|s| self.system_field * (1.0 + 0.5 * s as f64)).collect()
    }

    /// Set one configuration key; returns `false` when the key is not a
    /// model key. `preset` is handled by [`ModelSpec::from_entries`].
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "n_spins_s" => self.n_spins_s = e.usize()?,
            "n_spins_a" => self.n_spins_a = e.usize()?,
            "n_spins_b" => self.n_spins_b = e.usize()?,
            "epsilon" => self.epsilon = e.f64()?,
            "system_field" => self.system_field = e.f64()?,
            "j_nn" => self.env_couplings.j_nn = e.f64()?,
            "j_nnn" => self.env_couplings.j_nnn = e.f64()?,
            "field_x" => self.env_fields.x = e.f64()?,
            "field_z" => self.env_fields.z = e.f64()?,
            "disorder_width" => self.disorder_width = e.f64()?,
            "seed" => self.seed = e.u64()?,
            "dim_cap" => self.dim_cap = e.usize()?,
            "interaction" => {
                let mut terms = Vec::new();
                for item in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (s, a) = item.split_once(':').ok_or_else(|| Error::Config {
                        line: Some(e.line),
                        msg: format!("interaction term `{item}` is not `JS:JA`"),
                    })?;
                    terms.push((s.trim().to_string(), a.trim().to_string()));
                }
                self.interaction_terms = terms;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Build from parsed entries: the optional `preset` key is applied
    /// first, then every other model key. Unknown keys are returned.
    pub fn from_entries(entries: &[Entry]) -> Result<(Self, Vec<Entry>)> {
        let n_b = match entries.iter().find(|e| e.key == "n_spins_b") {
            Some(e) => e.usize()?,
            None => 8,
        };
        let mut spec = match entries.iter().find(|e| e.key == "preset") {
            Some(e) => Self::preset(&e.value, n_b).map_err(|err| Error::Config {
                line: Some(e.line),
                msg: err.to_string(),
            })?,
            None => Self::chaotic(n_b),
        };
        let mut rest = Vec::new();
        for e in entries {
            if e.key == "preset" {
                continue;
            }
            if !spec.apply(e)? {
                rest.push(e.clone());
            }
        }
        Ok((spec, rest))
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let entries = kv::parse(text)?;
        let (spec, rest) = Self::from_entries(&entries)?;
        if let Some(e) = rest.first() {
            return Err(Error::Config { line: Some(e.line), msg: format!("unknown key `{}`", e.key) });
        }
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        let f = kv::fmt_f64;
        let terms: Vec<String> =
            self.interaction_terms.iter().map(|(s, a)| format!("{s}:{a}")).collect();
        format!(
            "n_spins_s = {}\nn_spins_a = {}\nn_spins_b = {}\nepsilon = {}\nsystem_field = {}\n\
             interaction = {}\nj_nn = {}\nj_nnn = {}\nfield_x = {}\nfield_z = {}\n\
             disorder_width = {}\nseed = {}\ndim_cap = {}\n",
            self.n_spins_s,
            self.n_spins_a,
            self.n_spins_b,
            f(self.epsilon),
            f(self.system_field),
            terms.join(", "),
            f(self.env_couplings.j_nn),
            f(self.env_couplings.j_nnn),
            f(self.env_fields.x),
            f(self.env_fields.z),
            f(self.disorder_width),
            self.seed,
            self.dim_cap,
        )
    }
}

fn resolve_sites(ops: &[SiteOp], n_spins: usize, default: usize) -> Result<Vec<(usize, Pauli)>> {
    ops.iter()
        .map(|o| {
            let site = o.site.unwrap_or(default);
            if site >= n_spins {
                return Err(Error::Validation(format!(
                    "operator site {site} outside a register of {n_spins} spins"
                )));
            }
            Ok((site, o.kind))
        })
        .collect()
}

/// A factorized interaction term J^S ⊗ J^A (without the factor ε).
#[derive(Debug, Clone)]
pub struct InteractionTerm {
    pub label: (String, String),
    pub j_s: Op,
    pub j_a: Op,
}

/// The pieces of H = H^S + H^I + H^E on an explicit `S ⊗ A ⊗ B` space.
///
/// The total Hamiltonian is materialized on request ([`Self::h_total`]);
/// at the largest supported sizes only the factors fit in memory.
#[derive(Debug, Clone)]
pub struct HamiltonianSet {
    pub space: CompositeSpace,
    pub h_s: Op,
    pub h_env: Op,
    /// Operator on S ⊗ A, including the factor ε.
    pub h_int: Op,
    pub epsilon: f64,
    /// Present when H^I is known in the form ε Σ_l J^S_l ⊗ J^A_l.
    pub terms: Option<Vec<InteractionTerm>>,
}

pub fn build_model(spec: &ModelSpec) -> Result<HamiltonianSet> {
    spec.validate()?;
    let space = spec.space()?;
    let ns = spec.n_spins_s;
    let na = spec.n_spins_a;

    let mut h_s = Op::zeros((space.n_s(), space.n_s()));
    for (s, d) in spec.system_splittings().into_iter().enumerate() {
        h_s = h_s + pauli_product(ns, &[(s, Pauli::Z)])?.mapv(|z| z * (0.5 * d));
    }
    check_nondegenerate(&h_s)?;

    let (hx, hz) = spec.site_fields();
    let h_env = chain_hamiltonian(spec.n_env_spins(), spec.env_couplings, &hx, &hz);

    let mut terms = Vec::new();
    let mut h_int = Op::zeros((space.n_s() * space.n_a(), space.n_s() * space.n_a()));
    for (ls, la) in &spec.interaction_terms {
        let j_s = pauli_product(ns, &resolve_sites(&parse_label(ls)?, ns, ns - 1)?)?;
        let j_a = pauli_product(na, &resolve_sites(&parse_label(la)?, na, 0)?)?;
        if hermitian_defect(&j_s) > HERMITIAN_TOL || hermitian_defect(&j_a) > HERMITIAN_TOL {
            return Err(Error::Validation(format!("interaction term {ls}:{la} is not Hermitian")));
        }
        h_int = h_int + kron(&j_s, &j_a).mapv(|z| z * spec.epsilon);
        terms.push(InteractionTerm { label: (ls.clone(), la.clone()), j_s, j_a });
    }

    Ok(HamiltonianSet { space, h_s, h_env, h_int, epsilon: spec.epsilon, terms: Some(terms) })
}

/// Disordered Ising chain on `n` spins, real symmetric.
pub fn chain_hamiltonian(n: usize, j: EnvCouplings, hx: &[f64], hz: &[f64]) -> Op {
    let dim = 1usize << n;
    let bit = |k: usize, site: usize| (k >> (n - 1 - site)) & 1 == 1;
    let sz = |k: usize, site: usize| if bit(k, site) { -1.0 } else { 1.0 };
    let mut h = Op::zeros((dim, dim));
    for k in 0..dim {
        let mut d = 0.0;
        for s in 0..n {
            d += hz[s] * sz(k, s);
            if s + 1 < n {
                d += j.j_nn * sz(k, s) * sz(k, s + 1);
            }
            if s + 2 < n {
                d += j.j_nnn * sz(k, s) * sz(k, s + 2);
            }
        }
        h[[k, k]] = c(d, 0.0);
        for s in 0..n {
            if hx[s] != 0.0 {
                let to = k ^ (1 << (n - 1 - s));
                h[[to, k]] += c(hx[s], 0.0);
            }
        }
    }
    h
}

fn check_nondegenerate(h_s: &Op) -> Result<()> {
    let w = linalg::eigvalsh(h_s)?;
    let min_gap = w.windows(2).into_iter().map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min);
    if min_gap < GAP_THRESHOLD {
        return Err(Error::Degenerate { gap: min_gap, threshold: GAP_THRESHOLD });
    }
    Ok(())
}

impl HamiltonianSet {
    /// Assemble from explicit operators, validating shapes and Hermiticity.
    pub fn from_parts(
        space: CompositeSpace,
        h_s: Op,
        h_env: Op,
        h_int: Op,
        epsilon: f64,
        terms: Option<Vec<InteractionTerm>>,
    ) -> Result<Self> {
        let want = [
            (&h_s, space.n_s(), "H^S"),
            (&h_env, space.n_env(), "H^E"),
            (&h_int, space.n_s() * space.n_a(), "H^I"),
        ];
        for (op, n, what) in want {
            if op.dim() != (n, n) {
                return Err(Error::Shape(format!("{what} is {:?}, expected {n}x{n}", op.dim())));
            }
            let scale = linalg::max_abs(&op.view()).max(1.0);
            if hermitian_defect(op) > HERMITIAN_TOL * scale {
                return Err(Error::Validation(format!("{what} is not Hermitian")));
            }
        }
        check_nondegenerate(&h_s)?;
        if let Some(ts) = &terms {
            let mut sum = Op::zeros(h_int.dim());
            for t in ts {
                sum = sum + kron(&t.j_s, &t.j_a).mapv(|z| z * epsilon);
            }
            if max_abs_diff(&sum, &h_int) > HERMITIAN_TOL {
                return Err(Error::Validation("interaction terms do not reproduce H^I".into()));
            }
        }
        Ok(Self { space, h_s, h_env, h_int, epsilon, terms })
    }

    /// H = H^S ⊗ 1 + 1 ⊗ H^E + H^I ⊗ 1_B, written directly in flat indices.
    pub fn h_total(&self) -> Op {
        let sp = &self.space;
        let (ns, na, nb, ne) = (sp.n_s(), sp.n_a(), sp.n_b(), sp.n_env());
        let mut h = Op::zeros((sp.n_tot(), sp.n_tot()));
        for s in 0..ns {
            for t in 0..ns {
                let hs = self.h_s[[s, t]];
                for a in 0..na {
                    for a2 in 0..na {
                        let hi = self.h_int[[s * na + a, t * na + a2]];
                        if hi == ZERO {
                            continue;
                        }
                        for b in 0..nb {
                            h[[s * ne + a * nb + b, t * ne + a2 * nb + b]] += hi;
                        }
                    }
                }
                if hs != ZERO {
                    for e in 0..ne {
                        h[[s * ne + e, t * ne + e]] += hs;
                    }
                }
            }
            let mut blk = h.slice_mut(ndarray::s![s * ne..(s + 1) * ne, s * ne..(s + 1) * ne]);
            blk += &self.h_env;
        }
        h
    }

    /// Whether every operator is real, so the real eigensolver applies.
    pub fn is_real(&self) -> bool {
        [&self.h_s, &self.h_env, &self.h_int].iter().all(|m| m.iter().all(|z| z.im == 0.0))
    }

    /// J^A_l promoted to the environment A ⊗ B.
    pub fn j_a_env(&self, l: usize) -> Result<Op> {
        let terms = self.factorized()?;
        let t = terms
            .get(l)
            .ok_or(Error::Range { what: "interaction term", index: l, bound: terms.len() })?;
        self.space.embed_a_in_env(&t.j_a)
    }

    pub fn factorized(&self) -> Result<&[InteractionTerm]> {
        self.terms.as_deref().ok_or_else(|| {
            Error::UnsupportedForm("interaction not given as Σ_l J^S_l ⊗ J^A_l".into())
        })
    }

    /// The same model with H^I rescaled to a new coupling strength.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Validation(format!("epsilon = {epsilon}")));
        }
        let h_int = if self.epsilon > 0.0 {
            self.h_int.mapv(|z| z * (epsilon / self.epsilon))
        } else if let Some(ts) = &self.terms {
            let mut sum = Op::zeros(self.h_int.dim());
            for t in ts {
                sum = sum + kron(&t.j_s, &t.j_a).mapv(|z| z * epsilon);
            }
            sum
        } else if epsilon == 0.0 {
            self.h_int.clone()
        } else {
            return Err(Error::UnsupportedForm("cannot rescale a zero generic interaction".into()));
        };
        Ok(Self { h_int, epsilon, ..self.clone() })
    }
}

/// ΔE = E_max − E_min of the total Hamiltonian.
pub fn spectral_span(hs: &HamiltonianSet) -> Result<f64> {
    let w = linalg::eigvalsh(&hs.h_total())?;
    span_of(w.as_slice().unwrap_or(&[]))
}

pub fn span_of(values: &[f64]) -> Result<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span >= GAP_THRESHOLD) {
        return Err(Error::Degenerate { gap: span.max(0.0), threshold: GAP_THRESHOLD });
    }
    Ok(span)
}

/// Mean ratio of consecutive level spacings, min(s_k, s_{k+1}) /
/// max(s_k, s_{k+1}), over the central half of the sorted spectrum.
/// About 0.53 for GOE and 0.386 for Poisson statistics.
pub fn level_spacing_ratio(values: &[f64]) -> Result<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let core = &v[n / 4..(3 * n) / 4];
    if core.len() < 3 {
        return Err(Error::Validation(format!("need at least 3 central levels, have {}", core.len())));
    }
    let gaps: Vec<f64> = core.windows(2).map(|p| p[1] - p[0]).collect();
    let ratios: Vec<f64> = gaps
        .windows(2)
        .filter(|g| g[0].max(g[1]) > 0.0)
        .map(|g| g[0].min(g[1]) / g[0].max(g[1]))
        .collect();
    if ratios.is_empty() {
        return Err(Error::Validation("all central spacings vanish".into()));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::Factor;
    use crate::linalg::{commutator, diag, identity};

    fn sz() -> Op {
        diag(&[1.0, -1.0])
    }

    #[test]
    fn labels_parse() {
        assert_eq!(parse_label("x").unwrap(), vec![SiteOp { site: None, kind: Pauli::X }]);
        assert_eq!(
            parse_label("z0n1").unwrap(),
            vec![SiteOp { site: Some(0), kind: Pauli::Z }, SiteOp { site: Some(1), kind: Pauli::N }]
        );
        assert!(parse_label("q").is_err());
        assert!(parse_label("").is_err());
        assert!(parse_label("1").unwrap().is_empty());
    }

    #[test]
    fn pauli_matrices() {
        let x = pauli_product(1, &[(0, Pauli::X)]).unwrap();
        let y = pauli_product(1, &[(0, Pauli::Y)]).unwrap();
        let z = pauli_product(1, &[(0, Pauli::Z)]).unwrap();
        // σx σy = i σz
        let xy = x.dot(&y);
        assert!(max_abs_diff(&xy, &z.mapv(|v| v * c(0.0, 1.0))) < 1e-15);
        let n = pauli_product(1, &[(0, Pauli::N)]).unwrap();
        assert_eq!(n, diag(&[1.0, 0.0]));
    }

    #[test]
    fn pauli_product_is_big_endian_kron() {
        let x = pauli_product(1, &[(0, Pauli::X)]).unwrap();
        let z = sz();
        let xz = pauli_product(2, &[(0, Pauli::X), (1, Pauli::Z)]).unwrap();
        assert_eq!(xz, kron(&x, &z));
        let z1 = pauli_product(3, &[(1, Pauli::Z)]).unwrap();
        assert_eq!(z1, kron(&kron(&identity(2), &z), &identity(2)));
    }

    #[test]
    fn zero_coupling_has_zero_interaction() {
        let spec = ModelSpec { epsilon: 0.0, ..ModelSpec::chaotic(2) };
        let hs = build_model(&spec).unwrap();
        assert!(hs.h_int.iter().all(|z| *z == ZERO));
        let sp = hs.space;
        let expect = sp.embed(&hs.h_s, Factor::S).unwrap() + sp.embed(&hs.h_env, Factor::AB).unwrap();
        assert!(max_abs_diff(&hs.h_total(), &expect) < 1e-12);
    }

    #[test]
    fn single_ising_bond_interaction() {
        let spec = ModelSpec {
            n_spins_b: 1,
            epsilon: 0.37,
            interaction_terms: vec![("z".into(), "z".into())],
            env_couplings: EnvCouplings { j_nn: 0.0, j_nnn: 0.0 },
            env_fields: EnvFields { x: 0.0, z: 0.0 },
            disorder_width: 0.0,
            ..ModelSpec::chaotic(1)
        };
        let hs = build_model(&spec).unwrap();
        let full = hs.space.embed(&hs.h_int, Factor::SA).unwrap();
        // Hand-written ε σz⊗σz⊗1 on the 8 basis states |s a b⟩.
        let signs = [1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0];
        let expect = diag(&signs.map(|s| 0.37 * s));
        assert!(max_abs_diff(&full, &expect) < 1e-15);
        assert!(hs.h_env.iter().all(|z| *z == ZERO));
    }

    #[test]
    fn interaction_commutes_with_b_operators() {
        let spec = ModelSpec::chaotic(2);
        let hs = build_model(&spec).unwrap();
        let sp = hs.space;
        let hi = sp.embed(&hs.h_int, Factor::SA).unwrap();
        for (site, p) in [(0, Pauli::X), (1, Pauli::Y), (0, Pauli::Z)] {
            let pb = sp.embed(&pauli_product(2, &[(site, p)]).unwrap(), Factor::B).unwrap();
            assert!(linalg::max_abs(&commutator(&hi, &pb).view()) < 1e-12);
        }
    }

    #[test]
    fn total_matches_embeddings() {
        let spec = ModelSpec {
            n_spins_s: 2,
            n_spins_a: 2,
            interaction_terms: vec![("x".into(), "n".into()), ("z0".into(), "y1".into())],
            ..ModelSpec::chaotic(2)
        };
        let hs = build_model(&spec).unwrap();
        let sp = hs.space;
        let expect = sp.embed(&hs.h_s, Factor::S).unwrap()
            + sp.embed(&hs.h_int, Factor::SA).unwrap()
            + sp.embed(&hs.h_env, Factor::AB).unwrap();
        assert!(max_abs_diff(&hs.h_total(), &expect) < 1e-12);
        assert!(!hs.is_real());
        for m in [&hs.h_s, &hs.h_env, &hs.h_int] {
            assert!(hermitian_defect(m) < 1e-12);
        }
    }

    #[test]
    fn degenerate_system_rejected() {
        let spec = ModelSpec { system_field: 1e-11, ..ModelSpec::chaotic(2) };
        assert!(matches!(build_model(&spec), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn dimension_cap() {
        let spec = ModelSpec { dim_cap: 16, ..ModelSpec::chaotic(3) };
        assert!(matches!(build_model(&spec), Err(Error::Resource { dim: 32, cap: 16 })));
    }

    #[test]
    fn invalid_specs() {
        assert!(build_model(&ModelSpec { epsilon: -1.0, ..ModelSpec::chaotic(2) }).is_err());
        assert!(build_model(&ModelSpec { n_spins_b: 0, ..ModelSpec::chaotic(2) }).is_err());
        let bad_site = ModelSpec { interaction_terms: vec![("x".into(), "z3".into())], ..ModelSpec::chaotic(2) };
        assert!(build_model(&bad_site).is_err());
    }

    #[test]
    fn span_of_diagonal_total() {
        let sp = CompositeSpace::new(2, 1, 2).unwrap();
        let hs = HamiltonianSet::from_parts(
            sp,
            diag(&[0.0, 2.0]),
            diag(&[0.0, 1.0]),
            Op::zeros((2, 2)),
            0.0,
            None,
        )
        .unwrap();
        assert_eq!(hs.h_total(), diag(&[0.0, 1.0, 2.0, 3.0]));
        assert!((spectral_span(&hs).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn from_parts_rejects_degenerate_system() {
        let sp = CompositeSpace::new(2, 1, 2).unwrap();
        let r = HamiltonianSet::from_parts(sp, diag(&[0.0, 1e-12]), diag(&[0.0, 1.0]), Op::zeros((2, 2)), 0.0, None);
        assert!(matches!(r, Err(Error::Degenerate { .. })));
        assert!(span_of(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn reproducible() {
        let a = build_model(&ModelSpec::chaotic(3)).unwrap();
        let b = build_model(&ModelSpec::chaotic(3)).unwrap();
        assert_eq!(a.h_env, b.h_env);
        assert_eq!(a.h_int, b.h_int);
        let c2 = build_model(&ModelSpec { seed: 2, ..ModelSpec::chaotic(3) }).unwrap();
        assert_ne!(a.h_env, c2.h_env);
    }

    #[test]
    fn kv_round_trip() {
        let spec = ModelSpec {
            epsilon: 0.123456789,
            interaction_terms: vec![("x".into(), "n".into()), ("z".into(), "z".into())],
            seed: 99,
            ..ModelSpec::integrable(5)
        };
        let back = ModelSpec::from_kv(&spec.to_kv()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn kv_preset_then_overrides() {
        let s = ModelSpec::from_kv("field_z = 0.7\npreset = integrable\nn_spins_b = 4\n").unwrap();
        assert_eq!(s.env_fields.x, 0.0);
        assert_eq!(s.env_fields.z, 0.7);
        assert_eq!(s.n_spins_b, 4);
        assert!(ModelSpec::from_kv("bogus = 1").is_err());
        assert!(ModelSpec::from_kv("preset = weird").is_err());
    }

    #[test]
    fn spacing_ratio_of_picket_fence_is_one() {
        let v: Vec<f64> = (0..40).map(|k| k as f64).collect();
        assert!((level_spacing_ratio(&v).unwrap() - 1.0).abs() < 1e-12);
        assert!(level_spacing_ratio(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn with_epsilon_rescales() {
        let hs = build_model(&ModelSpec::chaotic(2)).unwrap();
        let h2 = hs.with_epsilon(0.2).unwrap();
        let zero = hs.with_epsilon(0.0).unwrap();
        let back = zero.with_epsilon(0.2).unwrap();
        assert!(max_abs_diff(&h2.h_int, &back.h_int) < 1e-15);
    }
}
