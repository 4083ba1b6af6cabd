//! Experiment configuration and the comparison pipeline: microcanonical
//! reduced state versus canonical states of the bare, renormalized and
//! mean-field system Hamiltonians, evaluated over parameter sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::diagnostics::{self, BareDiagonalCheck, TypicalCheck};
use crate::ensembles::{self, DensityMatrix};
use crate::error::{Error, Result};
use crate::kv::{self, fmt_f64, Entry};
use crate::linalg::{self, Op};
use crate::models::{build_model, HamiltonianSet, ModelSpec};
use crate::renorm::{self, RenormOptions, RenormalizedFrame};
use crate::rng;
use crate::spectra::{self, diagonalize, Spectrum, SpectrumCache};
use crate::stats::{self, LinearFit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum WindowPlacement {
    /// Lower edge and width as fractions of the total spectral span.
    Fraction { lower: f64, width: f64 },
    /// Absolute lower edge E and width δE.
    Absolute { e_lo: f64, width: f64 },
}

/// How the entries of `epsilon_sweep` are turned into coupling strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EpsilonScale {
    Absolute,
    /// ε = value × (E^E_max − E^E_min).
    EnvBandwidth,
    /// ε = value × (minimal H^S gap) / max |(H^I_{αβ})_{ii}| at ε = 1, the
    /// maximum taken over the environment windows of the comparison.
    Gap,
}

impl EpsilonScale {
    fn parse(e: &Entry) -> Result<Self> {
        match e.value.as_str() {
            "absolute" => Ok(Self::Absolute),
            "env_bandwidth" => Ok(Self::EnvBandwidth),
            "gap" => Ok(Self::Gap),
            other => Err(Error::Config { line: Some(e.line), msg: format!("unknown epsilon_scale `{other}`") }),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Absolute => "absolute",
            Self::EnvBandwidth => "env_bandwidth",
            Self::Gap => "gap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Diagnostic {
    GStats,
    Hierarchy,
    BareDiagonal,
    Eth,
    RenormDiagonal,
    Typical,
}

impl Diagnostic {
    pub const ALL: [Diagnostic; 6] =
        [Self::GStats, Self::Hierarchy, Self::BareDiagonal, Self::Eth, Self::RenormDiagonal, Self::Typical];

    pub fn name(self) -> &'static str {
        match self {
            Self::GStats => "g_stats",
            Self::Hierarchy => "hierarchy",
            Self::BareDiagonal => "bare_diagonal",
            Self::Eth => "eth",
            Self::RenormDiagonal => "renorm_diagonal",
            Self::Typical => "typical",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub renorm_tol: f64,
    pub renorm_max_iter: usize,
    pub mixing: f64,
    pub eth_threshold: f64,
    /// ETH window width as a fraction of the environment span.
    pub eth_window: f64,
    pub sample_count: usize,
    pub typical_rel_tol: f64,
    pub typical_offdiag_c: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            renorm_tol: 1e-10,
            renorm_max_iter: 200,
            mixing: 1.0,
            eth_threshold: diagnostics::DEFAULT_ETH_THRESHOLD,
            eth_window: 0.02,
            sample_count: 2000,
            typical_rel_tol: 0.25,
            typical_offdiag_c: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub window: WindowPlacement,
    pub epsilon_scale: EpsilonScale,
    pub epsilon_sweep: Vec<f64>,
    pub size_sweep: Vec<usize>,
    pub seeds: Vec<u64>,
    pub diagnostics: Vec<Diagnostic>,
    pub output_dir: PathBuf,
    pub tolerances: Tolerances,
    /// Worker threads for sweeps; 0 means the available parallelism.
    pub workers: usize,
    pub use_cache: bool,
    /// Explicit acknowledgment that the dimension cap may be exceeded.
    pub allow_large: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelSpec::default();
        Self {
            epsilon_sweep: vec![model.epsilon],
            size_sweep: vec![model.n_spins_b],
            seeds: vec![model.seed],
            model,
            window: WindowPlacement::Fraction { lower: 0.3, width: 0.02 },
            epsilon_scale: EpsilonScale::Absolute,
            diagnostics: Vec::new(),
            output_dir: PathBuf::from("out"),
            tolerances: Tolerances::default(),
            workers: 0,
            use_cache: true,
            allow_large: false,
        }
    }
}

fn positive_list<T>(e: &Entry, v: Vec<T>) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Config { line: Some(e.line), msg: format!("`{}` must not be empty", e.key) });
    }
    Ok(v)
}

impl ExperimentConfig {
    /// Parse and validate configuration text. Model keys (including
    /// `preset`) configure the model; sweep lists default to the model's own
    /// value.
    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg = Self::parse_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse without validating, for callers that layer overrides first.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let entries = kv::parse(text)?;
        let (model, rest) = ModelSpec::from_entries(&entries)?;
        let mut cfg = Self {
            epsilon_sweep: vec![model.epsilon],
            size_sweep: vec![model.n_spins_b],
            seeds: vec![model.seed],
            model,
            ..Self::default()
        };
        let (mut lower, mut width, mut e_lo, mut abs_width) = (None, None, None, None);
        for e in &rest {
            match e.key.as_str() {
                "window_lower" => lower = Some(e.f64()?),
                "window_width" => width = Some(e.f64()?),
                "window_e_lo" => e_lo = Some(e.f64()?),
                "window_delta_e" => abs_width = Some(e.f64()?),
                "epsilon_scale" => cfg.epsilon_scale = EpsilonScale::parse(e)?,
                "epsilon_sweep" => cfg.epsilon_sweep = positive_list(e, e.f64_list()?)?,
                "size_sweep" => cfg.size_sweep = positive_list(e, e.usize_list()?)?,
                "seeds" => cfg.seeds = positive_list(e, e.u64_list()?)?,
                "diagnostics" => {
                    let mut ds = Vec::new();
                    for name in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        if name == "all" {
                            ds.extend(Diagnostic::ALL);
                            continue;
                        }
                        ds.push(Diagnostic::from_name(name).ok_or_else(|| Error::Config {
                            line: Some(e.line),
                            msg: format!("unknown diagnostic `{name}`"),
                        })?);
                    }
                    ds.sort();
                    ds.dedup();
                    cfg.diagnostics = ds;
                }
                "output_dir" => cfg.output_dir = PathBuf::from(&e.value),
                "renorm_tol" => cfg.tolerances.renorm_tol = e.f64()?,
                "renorm_max_iter" => cfg.tolerances.renorm_max_iter = e.usize()?,
                "mixing" => cfg.tolerances.mixing = e.f64()?,
                "eth_threshold" => cfg.tolerances.eth_threshold = e.f64()?,
                "eth_window" => cfg.tolerances.eth_window = e.f64()?,
                "sample_count" => cfg.tolerances.sample_count = e.usize()?,
                "typical_rel_tol" => cfg.tolerances.typical_rel_tol = e.f64()?,
                "typical_offdiag_c" => cfg.tolerances.typical_offdiag_c = e.f64()?,
                "workers" => cfg.workers = e.usize()?,
                "cache" => cfg.use_cache = e.bool()?,
                "allow_large_dimension" => cfg.allow_large = e.bool()?,
                _ => return Err(Error::Config { line: Some(e.line), msg: format!("unknown key `{}`", e.key) }),
            }
        }
        cfg.window = match (lower, width, e_lo, abs_width) {
            (None, None, None, None) => cfg.window,
            (l, w, None, None) => {
                let WindowPlacement::Fraction { lower: l0, width: w0 } = cfg.window else { unreachable!() };
                WindowPlacement::Fraction { lower: l.unwrap_or(l0), width: w.unwrap_or(w0) }
            }
            (None, None, Some(a), Some(b)) => WindowPlacement::Absolute { e_lo: a, width: b },
            _ => {
                return Err(Error::config(
                    "window: give either window_lower/window_width or both window_e_lo and window_delta_e",
                ))
            }
        };
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        Self::parse_kv(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon_sweep.is_empty() || self.size_sweep.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("sweep lists must not be empty"));
        }
        if self.epsilon_sweep.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(Error::config("epsilon_sweep entries must be finite and non-negative"));
        }
        match self.window {
            WindowPlacement::Fraction { lower, width } => {
                if !(lower >= 0.0 && width > 0.0 && lower + width <= 1.0) {
                    return Err(Error::config(format!(
                        "window fractions lower = {lower}, width = {width} must satisfy 0 ≤ lower, 0 < width, lower + width ≤ 1"
                    )));
                }
            }
            WindowPlacement::Absolute { e_lo, width } => {
                if !(e_lo.is_finite() && width > 0.0 && width.is_finite()) {
                    return Err(Error::config("absolute window needs a finite lower edge and positive width"));
                }
            }
        }
        let t = &self.tolerances;
        if !(t.renorm_tol >= 0.0) || t.renorm_max_iter == 0 || !(t.mixing > 0.0 && t.mixing <= 1.0) {
            return Err(Error::config("renormalization tolerances out of range"));
        }
        if t.sample_count == 0 || !(t.eth_threshold > 0.0) || !(t.eth_window > 0.0 && t.eth_window < 1.0) {
            return Err(Error::config("diagnostic tolerances out of range"));
        }
        for &n in &self.size_sweep {
            self.point_model(self.epsilon_sweep[0], n, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    /// The configuration as text that parses back to an equal value.
    pub fn to_kv(&self) -> String {
        let mut out = self.model.to_kv();
        let join = |v: Vec<String>| v.join(", ");
        match self.window {
            WindowPlacement::Fraction { lower, width } => {
                let _ = writeln!(out, "window_lower = {}\nwindow_width = {}", fmt_f64(lower), fmt_f64(width));
            }
            WindowPlacement::Absolute { e_lo, width } => {
                let _ = writeln!(out, "window_e_lo = {}\nwindow_delta_e = {}", fmt_f64(e_lo), fmt_f64(width));
            }
        }
        let t = &self.tolerances;
        let _ = write!(
            out,
            "epsilon_scale = {}\nepsilon_sweep = {}\nsize_sweep = {}\nseeds = {}\n",
            self.epsilon_scale.name(),
            join(self.epsilon_sweep.iter().map(|x| fmt_f64(*x)).collect()),
            join(self.size_sweep.iter().map(|x| x.to_string()).collect()),
            join(self.seeds.iter().map(|x| x.to_string()).collect()),
        );
        if !self.diagnostics.is_empty() {
            let _ = writeln!(out, "diagnostics = {}", join(self.diagnostics.iter().map(|d| d.name().to_string()).collect()));
        }
        let _ = write!(
            out,
            "output_dir = {}\nrenorm_tol = {}\nrenorm_max_iter = {}\nmixing = {}\neth_threshold = {}\n\
             eth_window = {}\nsample_count = {}\ntypical_rel_tol = {}\ntypical_offdiag_c = {}\n\
             workers = {}\ncache = {}\nallow_large_dimension = {}\n",
            self.output_dir.display(),
            fmt_f64(t.renorm_tol),
            t.renorm_max_iter,
            fmt_f64(t.mixing),
            fmt_f64(t.eth_threshold),
            fmt_f64(t.eth_window),
            t.sample_count,
            fmt_f64(t.typical_rel_tol),
            fmt_f64(t.typical_offdiag_c),
            self.workers,
            self.use_cache,
            self.allow_large,
        );
        out
    }

    fn point_model(&self, epsilon: f64, n_spins_b: usize, seed: u64) -> ModelSpec {
        let mut m = ModelSpec { epsilon, n_spins_b, seed, ..self.model.clone() };
        if self.allow_large {
            m.dim_cap = usize::MAX >> 1;
        }
        m
    }

    /// Every sweep point in the fixed order ε (outer), size, seed (inner).
    pub fn points(&self) -> Vec<PointSpec> {
        let mut out = Vec::new();
        for &eps in &self.epsilon_sweep {
            for &n in &self.size_sweep {
                for &seed in &self.seeds {
                    out.push(PointSpec { index: out.len(), epsilon_input: eps, n_spins_b: n, seed });
                }
            }
        }
        out
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output_dir.join("spectra")
    }

    /// Create the output directory and check that it accepts files.
    pub fn prepare_output(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir)
            .map_err(|e| Error::config(format!("output directory {}: {e}", self.output_dir.display())))?;
        let probe = self.output_dir.join(".write-probe");
        std::fs::write(&probe, b"")
            .map_err(|e| Error::config(format!("output directory {} is not writable: {e}", self.output_dir.display())))?;
        let _ = std::fs::remove_file(probe);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointSpec {
    pub index: usize,
    pub epsilon_input: f64,
    pub n_spins_b: usize,
    pub seed: u64,
}

impl PointSpec {
    pub fn label(&self) -> String {
        format!("point {} (epsilon {}, n_spins_b {}, seed {})", self.index, fmt_f64(self.epsilon_input), self.n_spins_b, self.seed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GSummary {
    pub diag_ratio: f64,
    pub offdiag_ratio: f64,
    pub normalization_defect: f64,
    pub completeness_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HierarchySummary {
    pub median_offdiag: f64,
    pub median_diag: f64,
    pub median_deviation: f64,
    pub bound: f64,
    pub fraction_under_bound: f64,
    pub median_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EthSummary {
    pub n_windows: usize,
    pub n_flagged: usize,
    pub eth_region: Option<(usize, usize)>,
    /// Stddev of ⟨J^A⟩ in the window holding the environment's centre.
    pub mid_stddev: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RenormDiagonalSummary {
    pub n_elements: usize,
    pub rms_renormalized: f64,
    pub rms_bare: f64,
    pub rms_renormalized_gamma: f64,
    pub rms_renormalized_other: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PointDiagnostics {
    pub g_stats: Option<GSummary>,
    pub hierarchy: Option<HierarchySummary>,
    pub bare_diagonal: Option<BareDiagonalCheck>,
    pub eth: Option<EthSummary>,
    pub renorm_diagonal: Option<RenormDiagonalSummary>,
    pub typical: Option<TypicalCheck>,
}

/// The canonical-form comparison at one (ε, size, seed, window).
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub point: PointSpec,
    pub epsilon: f64,
    pub n_total: usize,
    pub e_lo: f64,
    pub width: f64,
    pub n_window: usize,
    pub beta_bare: f64,
    pub beta_renorm: f64,
    pub beta_meanfield: f64,
    pub d_bare: f64,
    pub d_renorm: f64,
    pub d_meanfield: f64,
    pub iterations: usize,
    pub residual: f64,
    pub asymmetry: f64,
    /// Fixed points reached from randomly perturbed starting bases.
    pub multi_start: renorm::MultiStart,
    pub mean_field: Vec<f64>,
    pub rho: DensityMatrix,
    pub frame: RenormalizedFrame,
    pub diagnostics: PointDiagnostics,
}

/// Randomly perturbed starts per comparison point.
pub const MULTI_STARTS: usize = 2;
/// Perturbation strength relative to ‖H^S‖_max.
pub const MULTI_START_STRENGTH: f64 = 0.3;

/// Minimal gap of an ascending spectrum.
pub fn minimal_gap(values: &[f64]) -> f64 {
    values.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// ε such that max |(H^I_{αβ})_{ii}| = target · (minimal H^S gap). `unit`
/// is the model at ε = 1; i runs over the union of the environment windows
/// of α and β for the total-energy window [e_lo, e_lo + width].
pub fn calibrate_epsilon(unit: &HamiltonianSet, sys: &Spectrum, env: &Spectrum, e_lo: f64, width: f64, target: f64) -> Result<f64> {
    let blocks = renorm::interaction_blocks(unit, sys)?;
    let e = sys.values.as_slice().expect("contiguous");
    let windows = spectra::env_windows(env, e, e_lo, width)?;
    let mut worst: f64 = 0.0;
    for a in 0..blocks.n_s {
        for b in 0..blocks.n_s {
            for w in [&windows[a], &windows[b]] {
                for &i in &w.member_indices {
                    worst = worst.max(blocks.element(&unit.space, env, a, b, i, i).norm());
                }
            }
        }
    }
    if worst == 0.0 {
        return Err(Error::Numeric("interaction has no diagonal weight in the windows; cannot calibrate ε".into()));
    }
    Ok(target * minimal_gap(e) / worst)
}

fn spectrum_of(cache: Option<&SpectrumCache>, h: &Op) -> Result<Spectrum> {
    match cache {
        Some(c) => c.get_or_compute(h),
        None => diagonalize(h),
    }
}

fn uncoupled_range(sys: &Spectrum, env: &Spectrum) -> (f64, f64) {
    (sys.min() + env.min(), sys.max() + env.max() - sys.min() - env.min())
}

/// One comparison point: build, diagonalize, microcanonical ρ^S,
/// renormalize, mean-field split, three canonical fits, distances and the
/// requested diagnostics.
/// Model, spectra and microcanonical window of one sweep point.
#[derive(Debug, Clone)]
pub struct PreparedPoint {
    pub point: PointSpec,
    pub epsilon: f64,
    pub hs: HamiltonianSet,
    pub sys: Spectrum,
    pub env: Spectrum,
    pub total: Spectrum,
    pub window: spectra::EnergyWindow,
}

pub fn prepare_point(cfg: &ExperimentConfig, p: PointSpec, cache: Option<&SpectrumCache>) -> Result<PreparedPoint> {
    let unit_spec = cfg.point_model(1.0, p.n_spins_b, p.seed);
    let unit = build_model(&unit_spec)?;
    let sys = diagonalize(&unit.h_s)?;
    let env = spectrum_of(cache, &unit.h_env)?;
    let epsilon = match cfg.epsilon_scale {
        EpsilonScale::Absolute => p.epsilon_input,
        EpsilonScale::EnvBandwidth => p.epsilon_input * env.span(),
        EpsilonScale::Gap => {
            let (lo, span) = uncoupled_range(&sys, &env);
            let (e_lo, width) = match cfg.window {
                WindowPlacement::Fraction { lower, width } => spectra::place_window(lo, span, lower, width),
                WindowPlacement::Absolute { e_lo, width } => (e_lo, width),
            };
            calibrate_epsilon(&unit, &sys, &env, e_lo, width, p.epsilon_input)?
        }
    };
    let hs = unit.with_epsilon(epsilon)?;
    let total = {
        let h = hs.h_total();
        spectrum_of(cache, &h)?
    };
    let (e_lo, width) = match cfg.window {
        WindowPlacement::Fraction { lower, width } => spectra::place_window(total.min(), total.span(), lower, width),
        WindowPlacement::Absolute { e_lo, width } => (e_lo, width),
    };
    let window = spectra::make_window(&total, e_lo, width)?;
    Ok(PreparedPoint { point: p, epsilon, hs, sys, env, total, window })
}

/// One comparison point: build, diagonalize, microcanonical ρ^S,
/// renormalize, mean-field split, three canonical fits, distances and the
/// requested diagnostics.
pub fn evaluate_point(cfg: &ExperimentConfig, p: PointSpec, cache: Option<&SpectrumCache>) -> Result<ComparisonReport> {
    let inner = || -> Result<ComparisonReport> {
        let PreparedPoint { epsilon, hs, sys, env, total, window, .. } = prepare_point(cfg, p, cache)?;
        let (e_lo, width) = (window.e_lo, window.width);
        let rho = ensembles::microcanonical_reduced(&hs.space, &total, &window)?;
        let t = &cfg.tolerances;
        let opts = RenormOptions { tol: t.renorm_tol, max_iter: t.renorm_max_iter, mixing: t.mixing, adaptive_mixing: true };
        let frame = renorm::renormalize(&hs, &env, e_lo, width, opts)?;
        let multi_start = renorm::multi_start(&hs, &env, &frame, opts, MULTI_STARTS, MULTI_START_STRENGTH, rng::split(p.seed, 0x6d73))?;
        let mf = renorm::mean_field_split(&frame, &hs, &env)?;
        let h_mf = &hs.h_s + &mf.mf_operator;

        let fit = |h: &Op| -> Result<(f64, f64)> {
            let b = ensembles::fit_beta(&rho, h)?.beta;
            Ok((b, ensembles::trace_distance(&rho, &ensembles::canonical_state(h, b)?)?))
        };
        let (beta_bare, d_bare) = fit(&hs.h_s)?;
        let (beta_renorm, d_renorm) = fit(&frame.h_s_tilde)?;
        let (beta_meanfield, d_meanfield) = fit(&h_mf)?;

        let diagnostics = point_diagnostics(cfg, p, &hs, &sys, &env, &total, &window, &frame)?;
        Ok(ComparisonReport {
            point: p,
            epsilon,
            n_total: hs.space.n_tot(),
            e_lo,
            width,
            n_window: window.n_members,
            beta_bare,
            beta_renorm,
            beta_meanfield,
            d_bare,
            d_renorm,
            d_meanfield,
            iterations: frame.iterations,
            residual: frame.residual,
            asymmetry: frame.asymmetry,
            multi_start,
            mean_field: mf.mean_field,
            rho,
            frame,
            diagnostics,
        })
    };
    inner().map_err(|e| e.context(p.label()))
}

#[allow(clippy::too_many_arguments)]
fn point_diagnostics(
    cfg: &ExperimentConfig,
    p: PointSpec,
    hs: &HamiltonianSet,
    sys: &Spectrum,
    env: &Spectrum,
    total: &Spectrum,
    window: &spectra::EnergyWindow,
    frame: &RenormalizedFrame,
) -> Result<PointDiagnostics> {
    let mut out = PointDiagnostics::default();
    let t = &cfg.tolerances;
    let seed = |k: u64| rng::split(p.seed, 0x5eed_0000 + k);
    let blocks = if cfg.diagnostics.iter().any(|d| matches!(d, Diagnostic::Hierarchy | Diagnostic::BareDiagonal)) {
        Some(renorm::interaction_blocks(hs, sys)?)
    } else {
        None
    };
    for &d in &cfg.diagnostics {
        match d {
            Diagnostic::GStats => {
                let g = diagnostics::g_statistics(env, &hs.space, t.sample_count, seed(1))?;
                out.g_stats = Some(GSummary {
                    diag_ratio: g.diag_ratio(),
                    offdiag_ratio: g.offdiag_ratio(),
                    normalization_defect: g.normalization_defect,
                    completeness_defect: g.completeness_defect,
                });
            }
            Diagnostic::Hierarchy => {
                let h = diagnostics::element_hierarchy(blocks.as_ref().expect("built"), &hs.space, env, t.sample_count, seed(2))?;
                out.hierarchy = Some(HierarchySummary {
                    median_offdiag: h.offdiag_summary.median,
                    median_diag: h.diag_summary.median,
                    median_deviation: h.deviation_summary.median,
                    bound: h.bound,
                    fraction_under_bound: h.fraction_under_bound,
                    median_ratio: h.median_ratio,
                });
            }
            Diagnostic::BareDiagonal => {
                let b = blocks.as_ref().expect("built");
                let ws = spectra::env_windows(env, &b.energies, window.e_lo, window.width)?;
                out.bare_diagonal = Some(diagnostics::bare_diagonal_check(b, &hs.space, env, &ws)?);
            }
            Diagnostic::Eth => {
                let terms = hs.factorized()?;
                let width = t.eth_window * env.span();
                let scan = diagnostics::eth_scan(&hs.space, env, &terms[0].j_a, &terms[0].label.1, width, width, t.eth_threshold)?;
                let mid = 0.5 * (env.min() + env.max());
                let mid_stddev = scan
                    .reports
                    .iter()
                    .find(|r| r.lo <= mid && mid <= r.hi)
                    .map(|r| r.window_stddev)
                    .unwrap_or(f64::NAN);
                out.eth = Some(EthSummary {
                    n_windows: scan.reports.len(),
                    n_flagged: scan.n_flagged(),
                    eth_region: scan.eth_region,
                    mid_stddev,
                });
            }
            Diagnostic::RenormDiagonal => {
                let table = renorm::renormalized_diagonal_elements(frame, hs, env)?;
                let pick = |f: &dyn Fn(&renorm::DiagonalElement) -> Option<f64>| -> Vec<f64> { table.iter().filter_map(f).collect() };
                out.renorm_diagonal = Some(RenormDiagonalSummary {
                    n_elements: table.len(),
                    rms_renormalized: stats::rms(&pick(&|d| Some(d.renormalized_abs()))),
                    rms_bare: stats::rms(&pick(&|d| Some(d.bare_abs()))),
                    rms_renormalized_gamma: stats::rms(&pick(&|d| d.in_gamma_window.then(|| d.renormalized_abs()))),
                    rms_renormalized_other: stats::rms(&pick(&|d| (!d.in_gamma_window).then(|| d.renormalized_abs()))),
                });
            }
            Diagnostic::Typical => {
                let rep = ensembles::typical_vector_reduced(&hs.space, total, window, sys, env, seed(3))?;
                let ws = spectra::env_windows(env, sys.values.as_slice().expect("contiguous"), window.e_lo, window.width)?;
                out.typical = Some(diagnostics::typical_offdiag_check(&rep, &ws, t.typical_rel_tol, t.typical_offdiag_c)?);
            }
        }
    }
    Ok(out)
}

fn open_cache(cfg: &ExperimentConfig) -> Result<Option<SpectrumCache>> {
    if cfg.use_cache {
        Ok(Some(SpectrumCache::new(cfg.cache_dir())?))
    } else {
        Ok(None)
    }
}

/// Comparison at the configuration's first point.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let cache = open_cache(cfg)?;
    let p = cfg.points()[0];
    evaluate_point(cfg, p, cache.as_ref())
}

#[derive(Debug, Clone, Serialize)]
pub struct PointFailure {
    pub point: PointSpec,
    pub config_error: bool,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingFit {
    pub name: String,
    /// Fixed parameters of the fitted family, as `key=value` text.
    pub at: String,
    pub n_points: usize,
    pub fit: LinearFit,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config: String,
    pub points: Vec<ComparisonReport>,
    pub failures: Vec<PointFailure>,
    pub fits: Vec<ScalingFit>,
}

impl SweepReport {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Every point of the Cartesian sweep, failures recorded rather than
/// propagated. Points run on a worker pool; results keep sweep order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let cache = open_cache(cfg)?;
    let points = cfg.points();
    let workers = if cfg.workers == 0 { std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) } else { cfg.workers };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Numeric(format!("worker pool: {e}")))?;
    let results: Vec<Result<ComparisonReport>> = pool.install(|| {
        use rayon::prelude::*;
        points.par_iter().map(|&p| evaluate_point(cfg, p, cache.as_ref())).collect()
    });
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in points.iter().zip(results) {
        match r {
            Ok(rep) => ok.push(rep),
            Err(e) => {
                log::warn!("{e}");
                failures.push(PointFailure { point: *p, config_error: e.is_config(), message: e.to_string() });
            }
        }
    }
    let fits = sweep_fits(cfg, &ok);
    Ok(SweepReport { config: cfg.to_kv(), points: ok, failures, fits })
}

/// Scaling exponents over the sweep: median off-diagonal element versus
/// N_E per ε (when the hierarchy diagnostic ran), D_bare versus ε per size.
fn sweep_fits(cfg: &ExperimentConfig, pts: &[ComparisonReport]) -> Vec<ScalingFit> {
    let mut out = Vec::new();
    for &eps in &cfg.epsilon_sweep {
        let (x, y): (Vec<f64>, Vec<f64>) = pts
            .iter()
            .filter(|r| r.point.epsilon_input == eps)
            .filter_map(|r| r.diagnostics.hierarchy.as_ref().map(|h| ((r.n_total / (1 << cfg.model.n_spins_s)) as f64, h.median_offdiag)))
            .unzip();
        if let Ok(fit) = stats::loglog_fit(&x, &y) {
            out.push(ScalingFit { name: "offdiag_median_vs_n_env".into(), at: format!("epsilon={}", fmt_f64(eps)), n_points: x.len(), fit });
        }
    }
    for &n in &cfg.size_sweep {
        let (x, y): (Vec<f64>, Vec<f64>) =
            pts.iter().filter(|r| r.point.n_spins_b == n).map(|r| (r.epsilon, r.d_bare)).unzip();
        if let Ok(fit) = stats::loglog_fit(&x, &y) {
            out.push(ScalingFit { name: "d_bare_vs_epsilon".into(), at: format!("n_spins_b={n}"), n_points: x.len(), fit });
        }
    }
    out
}

const CSV_HEADER: [&str; 30] = [
    "index",
    "status",
    "epsilon_input",
    "epsilon",
    "n_spins_b",
    "seed",
    "n_total",
    "e_lo",
    "width",
    "n_window",
    "beta_bare",
    "beta_renorm",
    "beta_meanfield",
    "d_bare",
    "d_renorm",
    "d_meanfield",
    "iterations",
    "residual",
    "asymmetry",
    "mean_field",
    "g_diag_ratio",
    "g_offdiag_ratio",
    "offdiag_median",
    "offdiag_fraction_under_bound",
    "diag_offdiag_ratio",
    "eth_flagged_fraction",
    "rms_renorm_diag",
    "rms_bare_diag",
    "typical_pass",
    "error",
];

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn csv_row(r: &ComparisonReport) -> Vec<String> {
    let d = &r.diagnostics;
    vec![
        r.point.index.to_string(),
        "ok".into(),
        fmt_f64(r.point.epsilon_input),
        fmt_f64(r.epsilon),
        r.point.n_spins_b.to_string(),
        r.point.seed.to_string(),
        r.n_total.to_string(),
        fmt_f64(r.e_lo),
        fmt_f64(r.width),
        r.n_window.to_string(),
        fmt_f64(r.beta_bare),
        fmt_f64(r.beta_renorm),
        fmt_f64(r.beta_meanfield),
        fmt_f64(r.d_bare),
        fmt_f64(r.d_renorm),
        fmt_f64(r.d_meanfield),
        r.iterations.to_string(),
        fmt_f64(r.residual),
        fmt_f64(r.asymmetry),
        r.mean_field.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";"),
        opt(d.g_stats.as_ref().map(|g| g.diag_ratio)),
        opt(d.g_stats.as_ref().map(|g| g.offdiag_ratio)),
        opt(d.hierarchy.as_ref().map(|h| h.median_offdiag)),
        opt(d.hierarchy.as_ref().map(|h| h.fraction_under_bound)),
        opt(d.hierarchy.as_ref().and_then(|h| h.median_ratio)),
        opt(d.eth.as_ref().map(|e| e.n_flagged as f64 / e.n_windows.max(1) as f64)),
        opt(d.renorm_diagonal.as_ref().map(|x| x.rms_renormalized)),
        opt(d.renorm_diagonal.as_ref().map(|x| x.rms_bare)),
        d.typical.as_ref().map(|t| t.pass().to_string()).unwrap_or_default(),
        String::new(),
    ]
}

fn failure_row(f: &PointFailure) -> Vec<String> {
    let mut row = vec![String::new(); CSV_HEADER.len()];
    row[0] = f.point.index.to_string();
    row[1] = "error".into();
    row[2] = fmt_f64(f.point.epsilon_input);
    row[4] = f.point.n_spins_b.to_string();
    row[5] = f.point.seed.to_string();
    row[CSV_HEADER.len() - 1] = f.message.clone();
    row
}

/// `sweep.csv`: one row per point in sweep order, failures included.
pub fn write_sweep_csv<W: std::io::Write>(out: W, report: &SweepReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let mut rows: Vec<(usize, Vec<String>)> = report.points.iter().map(|r| (r.point.index, csv_row(r))).collect();
    rows.extend(report.failures.iter().map(|f| (f.point.index, failure_row(f))));
    rows.sort_by_key(|r| r.0);
    for (_, r) in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `report.json` and `sweep.csv` into the output directory.
pub fn write_outputs(cfg: &ExperimentConfig, report: &SweepReport) -> Result<()> {
    cfg.prepare_output()?;
    diagnostics::write_json_file(&cfg.output_dir.join("report.json"), report)?;
    write_sweep_csv(std::fs::File::create(cfg.output_dir.join("sweep.csv"))?, report)
}

/// Pseudo-sweep report around a single comparison.
pub fn single_point_report(cfg: &ExperimentConfig, result: Result<ComparisonReport>) -> SweepReport {
    let p = cfg.points()[0];
    let (points, failures) = match result {
        Ok(r) => (vec![r], Vec::new()),
        Err(e) => (Vec::new(), vec![PointFailure { point: p, config_error: e.is_config(), message: e.to_string() }]),
    };
    SweepReport { config: cfg.to_kv(), points, failures, fits: Vec::new() }
}

/// Linear-in-ε check of H^I_S: fit of ‖H^I_S‖_max against ε at fixed
/// windows, in the bare basis.
pub fn his_linearity(hs: &HamiltonianSet, env: &Spectrum, e_lo: f64, width: f64, epsilons: &[f64]) -> Result<LinearFit> {
    let sys = diagonalize(&hs.h_s)?;
    let mut y = Vec::with_capacity(epsilons.len());
    for &e in epsilons {
        let h = hs.with_epsilon(e)?;
        y.push(linalg::max_abs(&renorm::build_his(&h, &sys, env, e_lo, width)?.his.view()));
    }
    stats::linear_fit(epsilons, &y)
}

/// Files written by [`run_diagnostics`], relative to the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsBundle {
    pub files: Vec<String>,
    pub comparison: ComparisonReport,
}

/// Every diagnostic at the configuration's first point, with full per-sample
/// tables under `diagnostics/` (JSON and CSV) next to the comparison
/// report. Perturbative widths are evaluated for up to `width_states`
/// window members.
pub fn run_diagnostics(cfg: &ExperimentConfig, width_states: usize, eps_p: f64) -> Result<DiagnosticsBundle> {
    cfg.validate()?;
    cfg.prepare_output()?;
    let cache = open_cache(cfg)?;
    let p = cfg.points()[0];
    let mut full = cfg.clone();
    full.diagnostics = Diagnostic::ALL.to_vec();
    let comparison = evaluate_point(&full, p, cache.as_ref())?;
    let pp = prepare_point(cfg, p, cache.as_ref()).map_err(|e| e.context(p.label()))?;
    let dir = cfg.output_dir.join("diagnostics");
    std::fs::create_dir_all(&dir)?;
    let t = &cfg.tolerances;
    let seed = |k: u64| rng::split(p.seed, 0x5eed_0000 + k);
    let mut files = Vec::new();
    let mut emit = |name: &str, json: &dyn erased::Json, csv: Option<&dyn erased::Csv>| -> Result<()> {
        json.write(&dir.join(format!("{name}.json")))?;
        files.push(format!("diagnostics/{name}.json"));
        if let Some(c) = csv {
            c.write(&dir.join(format!("{name}.csv")))?;
            files.push(format!("diagnostics/{name}.csv"));
        }
        Ok(())
    };
    let hs = &pp.hs;
    let g = diagnostics::g_statistics(&pp.env, &hs.space, t.sample_count, seed(1))?;
    emit("g_stats", &g, Some(&g))?;
    let blocks = renorm::interaction_blocks(hs, &pp.sys)?;
    let h = diagnostics::element_hierarchy(&blocks, &hs.space, &pp.env, t.sample_count, seed(2))?;
    emit("hierarchy", &h, Some(&h))?;
    let ws = spectra::env_windows(&pp.env, &blocks.energies, pp.window.e_lo, pp.window.width)?;
    let b = diagnostics::bare_diagonal_check(&blocks, &hs.space, &pp.env, &ws)?;
    emit("bare_diagonal", &b, None)?;
    let terms = hs.factorized()?;
    let width = t.eth_window * pp.env.span();
    let eth = diagnostics::eth_scan(&hs.space, &pp.env, &terms[0].j_a, &terms[0].label.1, width, width, t.eth_threshold)?;
    emit("eth", &eth, Some(&eth))?;
    let table = renorm::renormalized_diagonal_elements(&comparison.frame, hs, &pp.env)?;
    emit("renorm_diagonal", &table, None)?;
    let members = &pp.window.member_indices;
    let step = (members.len() / width_states.max(1)).max(1);
    let etas: Vec<usize> = members.iter().step_by(step).take(width_states).copied().collect();
    let widths = diagnostics::perturbative_widths(hs, &pp.total, &pp.sys, &pp.env, &etas, eps_p)?;
    emit("widths", &widths, Some(&widths))?;
    emit("frame", &comparison.frame, None)?;
    let report = single_point_report(&full, Ok(comparison));
    write_outputs(cfg, &report)?;
    files.push("report.json".into());
    files.push("sweep.csv".into());
    let comparison = report.points.into_iter().next().expect("one point");
    Ok(DiagnosticsBundle { files, comparison })
}

mod erased {
    use super::*;

    pub trait Json {
        fn write(&self, path: &Path) -> Result<()>;
    }

    impl<T: Serialize> Json for T {
        fn write(&self, path: &Path) -> Result<()> {
            diagnostics::write_json_file(path, self)
        }
    }

    pub trait Csv {
        fn write(&self, path: &Path) -> Result<()>;
    }

    impl<T: diagnostics::CsvRows> Csv for T {
        fn write(&self, path: &Path) -> Result<()> {
            diagnostics::write_csv_file(path, self)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_kv(&format!(
            "preset = chaotic\nn_spins_b = 3\nepsilon = 0.1\nwindow_lower = 0.25\nwindow_width = 0.2\noutput_dir = {}\n",
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn diagnose_writes_every_table() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let b = run_diagnostics(&cfg, 4, 0.05).unwrap();
        for f in &b.files {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert!(b.comparison.diagnostics.g_stats.is_some());
    }

    #[test]
    fn config_round_trip() {
        let text = "preset = integrable\nn_spins_b = 4\nepsilon_sweep = 0.1, 0.2\nseeds = 3, 4\n\
                    diagnostics = eth, g_stats\nwindow_e_lo = -1.5\nwindow_delta_e = 0.25\nworkers = 2\n";
        let cfg = ExperimentConfig::from_kv(text).unwrap();
        assert_eq!(cfg.epsilon_sweep, vec![0.1, 0.2]);
        assert_eq!(cfg.size_sweep, vec![4]);
        assert_eq!(cfg.diagnostics, vec![Diagnostic::GStats, Diagnostic::Eth]);
        assert_eq!(cfg.window, WindowPlacement::Absolute { e_lo: -1.5, width: 0.25 });
        let again = ExperimentConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.points().len(), 4);
    }

    #[test]
    fn config_errors_carry_lines() {
        assert!(matches!(ExperimentConfig::from_kv("bogus = 1"), Err(Error::Config { line: Some(1), .. })));
        assert!(matches!(ExperimentConfig::from_kv("seeds = \n"), Err(Error::Config { line: Some(1), .. })));
        assert!(ExperimentConfig::from_kv("window_lower = 0.9\nwindow_width = 0.2").is_err());
        assert!(ExperimentConfig::from_kv("window_e_lo = 1").is_err());
        assert!(ExperimentConfig::from_kv("diagnostics = nope").is_err());
        let big = ExperimentConfig::from_kv("n_spins_b = 13");
        assert!(matches!(big, Err(Error::Resource { .. })));
        assert!(ExperimentConfig::from_kv("n_spins_b = 13\nallow_large_dimension = true").is_ok());
    }

    #[test]
    fn zero_coupling_distances_coincide() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.epsilon_sweep = vec![0.0];
        cfg.diagnostics = Diagnostic::ALL.to_vec();
        let r = run_comparison(&cfg).unwrap();
        assert_eq!(r.d_bare, r.d_renorm);
        assert_eq!(r.d_bare, r.d_meanfield);
        assert_eq!(r.iterations, 1);
        assert!(r.diagnostics.typical.as_ref().unwrap().n_window == r.n_window);
    }

    #[test]
    fn single_point_sweep_matches_comparison() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let one = run_comparison(&cfg).unwrap();
        let sw = run_sweep(&cfg).unwrap();
        assert_eq!(sw.points.len(), 1);
        let two = &sw.points[0];
        assert_eq!(one.d_bare, two.d_bare);
        assert_eq!(one.d_renorm, two.d_renorm);
        assert_eq!(one.beta_renorm, two.beta_renorm);
        // the second run hit the cache
        assert!(SpectrumCache::new(cfg.cache_dir()).unwrap().entries().unwrap().len() >= 2);
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.window = WindowPlacement::Absolute { e_lo: 1e3, width: 1.0 };
        cfg.size_sweep = vec![3];
        let sw = run_sweep(&cfg).unwrap();
        assert!(sw.is_partial());
        assert_eq!(sw.failures.len(), 1);
        assert!(!sw.failures[0].config_error);
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &sw).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",error,"));
    }

    #[test]
    fn calibrated_epsilon_hits_target() {
        let unit = build_model(&ModelSpec { epsilon: 1.0, ..ModelSpec::chaotic(4) }).unwrap();
        let sys = diagonalize(&unit.h_s).unwrap();
        let env = diagonalize(&unit.h_env).unwrap();
        let (lo, span) = uncoupled_range(&sys, &env);
        let (e_lo, w) = spectra::place_window(lo, span, 0.3, 0.1);
        let eps = calibrate_epsilon(&unit, &sys, &env, e_lo, w, 0.3).unwrap();
        let hs = unit.with_epsilon(eps).unwrap();
        let again = calibrate_epsilon(&hs, &sys, &env, e_lo, w, 0.3).unwrap();
        assert!((again * eps - eps).abs() < 1e-12 * eps.max(1.0));
    }

    #[test]
    fn his_is_linear_in_epsilon() {
        let unit = build_model(&ModelSpec { epsilon: 1.0, ..ModelSpec::chaotic(4) }).unwrap();
        let env = diagonalize(&unit.h_env).unwrap();
        let fit = his_linearity(&unit, &env, env.min() + 0.3 * env.span(), 0.2 * env.span(), &[0.01, 0.03, 0.05, 0.1]).unwrap();
        assert!(fit.r2 >= 0.999);
    }
}
