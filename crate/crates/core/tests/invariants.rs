use ndarray::Array2;
use selfham::diagnostics;
use selfham::ensembles::{self, DensityMatrix};
use selfham::experiment::{self, Diagnostic, EpsilonScale, ExperimentConfig, WindowPlacement};
use selfham::hilbert::{CompositeSpace, Factor};
use selfham::linalg::{self, C64};
use selfham::models::{self, build_model, HamiltonianSet, ModelSpec};
use selfham::renorm::{self, RenormOptions};
use selfham::spectra::{self, diagonalize};
use selfham::stats;

#[test]
fn identical_specs_build_identical_models() {
    let spec = ModelSpec { seed: 17, ..ModelSpec::chaotic(5) };
    let a = build_model(&spec).unwrap();
    let b = build_model(&spec).unwrap();
    let bits = |h: &HamiltonianSet| -> Vec<u64> {
        h.h_total().iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()]).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    let c = build_model(&ModelSpec { seed: 18, ..spec }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn chaotic_and_integrable_level_statistics() {
    let mut chaotic = Vec::new();
    let mut integrable = Vec::new();
    for seed in 1..=4 {
        let h = build_model(&ModelSpec { seed, ..ModelSpec::chaotic(9) }).unwrap();
        chaotic.push(models::level_spacing_ratio(linalg::eigvalsh(&h.h_env).unwrap().as_slice().unwrap()).unwrap());
        let h = build_model(&ModelSpec { seed, ..ModelSpec::integrable(9) }).unwrap();
        integrable.push(models::level_spacing_ratio(linalg::eigvalsh(&h.h_env).unwrap().as_slice().unwrap()).unwrap());
    }
    let (rc, ri) = (stats::mean(&chaotic), stats::mean(&integrable));
    assert!((0.50..=0.56).contains(&rc), "chaotic r = {rc}");
    assert!((0.37..=0.45).contains(&ri), "integrable r = {ri}");
}

#[test]
fn uncoupled_eigenvectors_are_product_states() {
    let hs = build_model(&ModelSpec { epsilon: 0.0, ..ModelSpec::chaotic(4) }).unwrap();
    let sys = diagonalize(&hs.h_s).unwrap();
    let env = diagonalize(&hs.h_env).unwrap();
    let total = diagonalize(&hs.h_total()).unwrap();
    let product = linalg::kron(&sys.vectors, &env.vectors);
    let overlap = linalg::dagger(&product.view()).dot(&total.vectors).mapv(|z| z.norm());
    for row in overlap.rows() {
        let big = row.iter().filter(|&&x| (x - 1.0).abs() < 1e-8).count();
        let small = row.iter().filter(|&&x| x < 1e-8).count();
        assert_eq!((big, small), (1, row.len() - 1));
    }
}

fn renormalized(n_b: usize, eps: f64) -> (HamiltonianSet, spectra::Spectrum, renorm::RenormalizedFrame) {
    let hs = build_model(&ModelSpec { epsilon: eps, ..ModelSpec::chaotic(n_b) }).unwrap();
    let env = diagonalize(&hs.h_env).unwrap();
    let sys = diagonalize(&hs.h_s).unwrap();
    let lo = env.min() + sys.min();
    let (e_lo, width) = spectra::place_window(lo, env.span() + sys.span(), 0.3, 0.05);
    let frame = renorm::renormalize(&hs, &env, e_lo, width, RenormOptions::default()).unwrap();
    (hs, env, frame)
}

#[test]
fn renormalized_split_reconstructs_total() {
    let (hs, env, frame) = renormalized(6, 0.2);
    let sp = &hs.space;
    let h_int_tilde = frame.h_int_tilde(&hs);
    let rebuilt = &(&sp.embed(&frame.h_s_tilde, Factor::S).unwrap() + &sp.embed(&h_int_tilde, Factor::SA).unwrap())
        + &sp.embed(&hs.h_env, Factor::AB).unwrap();
    assert!(linalg::max_abs_diff(&rebuilt, &hs.h_total()) < 1e-12);
    assert!(linalg::hermitian_defect(&frame.h_is) < 1e-10);

    let mf = renorm::mean_field_split(&frame, &hs, &env).unwrap();
    let sum = &(&hs.h_s + &mf.mf_operator) + &mf.delta_hs;
    assert!(linalg::max_abs_diff(&sum, &frame.h_s_tilde) < 1e-12);
}

#[test]
fn hermitization_asymmetry_is_within_eth_noise() {
    let (hs, env, frame) = renormalized(7, 0.2);
    let term = &hs.terms.as_ref().unwrap()[0];
    let w = 0.0213 * env.span();
    let scan = diagnostics::eth_scan(&hs.space, &env, &term.j_a, "n", w, w, 0.05).unwrap();
    let sds: Vec<f64> = scan.reports.iter().filter(|r| r.member_indices.len() >= 2).map(|r| r.window_stddev).collect();
    let scale = hs.epsilon * linalg::max_abs(&term.j_s.view()) * stats::median(&sds);
    assert!(frame.asymmetry <= 10.0 * scale, "{} vs {}", frame.asymmetry, scale);
}

#[test]
fn diagonal_to_offdiagonal_ratio_grows_with_environment() {
    let mut ratios = Vec::new();
    for n_b in 5..=8 {
        let hs = build_model(&ModelSpec { epsilon: 0.1, ..ModelSpec::chaotic(n_b) }).unwrap();
        let sys = diagonalize(&hs.h_s).unwrap();
        let env = diagonalize(&hs.h_env).unwrap();
        let blocks = renorm::interaction_blocks(&hs, &sys).unwrap();
        let h = diagnostics::element_hierarchy(&blocks, &hs.space, &env, 2000, 5).unwrap();
        assert!(h.hierarchy_applicable);
        ratios.push(h.median_ratio.unwrap());
    }
    for p in ratios.windows(2) {
        assert!(p[1] > p[0], "{ratios:?}");
    }
}

#[test]
fn typical_states_average_to_microcanonical() {
    let hs = build_model(&ModelSpec { epsilon: 0.1, ..ModelSpec::chaotic(6) }).unwrap();
    let total = diagonalize(&hs.h_total()).unwrap();
    let (e_lo, width) = spectra::place_window(total.min(), total.span(), 0.4, 0.05);
    let window = spectra::make_window(&total, e_lo, width).unwrap();
    let micro = ensembles::microcanonical_reduced(&hs.space, &total, &window).unwrap();
    let average = |count: u64| -> f64 {
        let mut acc = Array2::<C64>::zeros((2, 2));
        for seed in 0..count {
            acc += ensembles::typical_vector_rho(&hs.space, &total, &window, 1000 + seed).unwrap().matrix();
        }
        let rho = DensityMatrix::new(acc.mapv(|z| z / count as f64), ensembles::COMPUTATIONAL).unwrap();
        ensembles::trace_distance(&rho, &micro).unwrap()
    };
    let (d10, d100) = (average(10), average(100));
    assert!(d100 < d10, "{d10} -> {d100}");
}

#[test]
fn exponential_density_gives_canonical_weights() {
    // Four system levels and an environment with density ∝ e^{2E}.
    let sys_levels = [0.0, 0.12, 0.27, 0.4];
    let space = CompositeSpace::new(4, 2, 128).unwrap();
    let env_levels: Vec<f64> = (0..space.n_env()).map(|k| ((k + 1) as f64).ln() / 2.0).collect();
    let hs = HamiltonianSet::from_parts(
        space,
        linalg::diag(&sys_levels),
        linalg::diag(&env_levels),
        Array2::zeros((8, 8)),
        0.0,
        None,
    )
    .unwrap();
    let total = diagonalize(&hs.h_total()).unwrap();
    let window = spectra::make_window(&total, 2.45, 0.3).unwrap();
    let rho = ensembles::microcanonical_reduced(&hs.space, &total, &window).unwrap();
    let w: Vec<f64> = (0..4).map(|a| rho.matrix()[[a, a]].re.ln()).collect();
    let fit = stats::linear_fit(&sys_levels, &w).unwrap();
    assert!(fit.r2 >= 0.99, "R² = {}", fit.r2);
    assert!((fit.slope + 2.0).abs() < 0.3, "slope {}", fit.slope);
}

fn sweep_config(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec::chaotic(4),
        window: WindowPlacement::Fraction { lower: 0.3, width: 0.1 },
        epsilon_scale: EpsilonScale::Absolute,
        epsilon_sweep: vec![0.0, 0.1],
        size_sweep: vec![3, 4, 5],
        seeds: vec![1, 2],
        diagnostics: vec![Diagnostic::GStats, Diagnostic::Hierarchy],
        output_dir: dir.to_path_buf(),
        workers: 2,
        ..ExperimentConfig::default()
    }
}

#[test]
fn sweep_is_deterministic_and_cache_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sweep_config(&dir.path().join("a"));
    cfg.prepare_output().unwrap();
    let cold = experiment::run_sweep(&cfg).unwrap();
    experiment::write_outputs(&cfg, &cold).unwrap();
    assert!(!cold.is_partial(), "{:?}", cold.failures);
    let warm = experiment::run_sweep(&cfg).unwrap();
    assert_eq!(serde_json::to_string(&cold).unwrap(), serde_json::to_string(&warm).unwrap());
    let first = std::fs::read(cfg.output_dir.join("sweep.csv")).unwrap();

    cfg.output_dir = dir.path().join("b");
    cfg.use_cache = false;
    cfg.workers = 1;
    cfg.prepare_output().unwrap();
    let uncached = experiment::run_sweep(&cfg).unwrap();
    experiment::write_outputs(&cfg, &uncached).unwrap();
    assert_eq!(std::fs::read(cfg.output_dir.join("sweep.csv")).unwrap(), first);
}

#[test]
fn zero_coupling_sweep_has_equal_distances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { epsilon_sweep: vec![0.0], ..sweep_config(dir.path()) };
    let report = experiment::run_sweep(&cfg).unwrap();
    assert_eq!(report.points.len(), 6);
    for p in &report.points {
        assert!((p.d_bare - p.d_renorm).abs() < 1e-12);
        assert!((p.d_bare - p.d_meanfield).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&p.d_bare));
    }
}

#[test]
fn offdiagonal_scaling_fit_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        epsilon_sweep: vec![0.1],
        size_sweep: vec![5, 6, 7, 8],
        seeds: vec![1],
        ..sweep_config(dir.path())
    };
    let report = experiment::run_sweep(&cfg).unwrap();
    let fit = report.fits.iter().find(|f| f.name == "offdiag_median_vs_n_env").expect("fit");
    assert_eq!(fit.n_points, 4);
    assert!((fit.fit.slope + 0.5).abs() < 0.15, "slope {}", fit.fit.slope);
}
