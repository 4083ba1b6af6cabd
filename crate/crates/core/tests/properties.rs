use ndarray::Array2;
use proptest::prelude::*;
use selfham::diagnostics;
use selfham::ensembles::{self, DensityMatrix};
use selfham::hilbert::{CompositeSpace, Factor};
use selfham::linalg::{self, c, kron, C64};
use selfham::models::{build_model, ModelSpec};
use selfham::renorm::{self, Gamma};
use selfham::spectra::{self, diagonalize, SpectrumCache};
use selfham::testutil::{random_hermitian, random_state, random_vector};
use selfham::Op;

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (2usize..=3, 1usize..=3, 1usize..=4)
}

fn index_oracle(space: &CompositeSpace, rho: &Op) -> Op {
    let mut out = Array2::<C64>::zeros((space.n_s(), space.n_s()));
    for s in 0..space.n_s() {
        for t in 0..space.n_s() {
            for a in 0..space.n_a() {
                for b in 0..space.n_b() {
                    let i = space.flat_index(s, a, b).unwrap();
                    let j = space.flat_index(t, a, b).unwrap();
                    out[[s, t]] += rho[[i, j]];
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flat_index_round_trips((ns, na, nb) in dims()) {
        let space = CompositeSpace::new(ns, na, nb).unwrap();
        let mut seen = vec![false; space.n_tot()];
        for s in 0..ns {
            for a in 0..na {
                for b in 0..nb {
                    let k = space.flat_index(s, a, b).unwrap();
                    prop_assert_eq!(k, (s * na + a) * nb + b);
                    prop_assert_eq!(space.unflatten(k).unwrap(), (s, a, b));
                    prop_assert!(!seen[k]);
                    seen[k] = true;
                }
            }
        }
        prop_assert!(space.flat_index(ns, 0, 0).is_err());
    }

    #[test]
    fn partial_trace_of_product((ns, na, nb) in dims(), seed in 0u64..1000) {
        let space = CompositeSpace::new(ns, na, nb).unwrap();
        let op_s = random_hermitian(ns, seed);
        let rho_env = random_state(space.n_env(), seed + 1);
        let reduced = space.partial_trace_env(&kron(&op_s, &rho_env)).unwrap();
        let tr = linalg::trace(&rho_env);
        prop_assert!(linalg::max_abs_diff(&reduced, &op_s.mapv(|z| z * tr)) < 1e-12);
    }

    #[test]
    fn partial_trace_matches_index_oracle((ns, na, nb) in dims(), seed in 0u64..1000) {
        let space = CompositeSpace::new(ns, na, nb).unwrap();
        let rho = random_hermitian(space.n_tot(), seed);
        let reduced = space.partial_trace_env(&rho).unwrap();
        prop_assert!(linalg::max_abs_diff(&reduced, &index_oracle(&space, &rho)) < 1e-12);
        let dt = linalg::trace(&reduced) - linalg::trace(&rho);
        prop_assert!(dt.norm() < 1e-12);
    }

    #[test]
    fn partial_trace_is_linear((ns, na, nb) in dims(), seed in 0u64..1000, wa in -3.0f64..3.0, wb in -3.0f64..3.0) {
        let space = CompositeSpace::new(ns, na, nb).unwrap();
        let a = random_hermitian(space.n_tot(), seed);
        let b = random_hermitian(space.n_tot(), seed + 7);
        let mix = &a.mapv(|z| z * wa) + &b.mapv(|z| z * wb);
        let lhs = space.partial_trace_env(&mix).unwrap();
        let rhs = &space.partial_trace_env(&a).unwrap().mapv(|z| z * wa) + &space.partial_trace_env(&b).unwrap().mapv(|z| z * wb);
        prop_assert!(linalg::max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn embedded_system_operator_traces_back((ns, na, nb) in dims(), seed in 0u64..1000) {
        let space = CompositeSpace::new(ns, na, nb).unwrap();
        let op = random_hermitian(ns, seed);
        let emb = space.embed(&op, Factor::S).unwrap();
        let back = space.partial_trace_env(&emb).unwrap();
        let scale = space.n_env() as f64;
        prop_assert!(linalg::max_abs_diff(&back, &op.mapv(|z| z * scale)) < 1e-12);
    }

    #[test]
    fn completeness_identity((na, nb) in (1usize..=3, 1usize..=4), seed in 0u64..1000) {
        let n_env = na * nb;
        let space = CompositeSpace::new(2, na, nb).unwrap();
        let h = random_hermitian(n_env, seed);
        let env = diagonalize(&h).unwrap();
        let i = (seed as usize) % n_env;
        let gii = space.g_coefficients(&env.vectors.column(i), &env.vectors.column(i));
        let mut sum = Array2::<f64>::zeros((na, na));
        for j in 0..n_env {
            let g = space.g_coefficients(&env.vectors.column(i), &env.vectors.column(j));
            sum += &g.mapv(|z| z.norm_sqr());
        }
        for m in 0..na {
            for mp in 0..na {
                // Σ_j |G^{ij}_{mm'}|² = G^{ii}_{mm} for every m'.
                prop_assert!((sum[[m, mp]] - gii[[m, m]].re).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trace_distance_is_a_metric(n in 2usize..=4, seed in 0u64..1000) {
        let a = DensityMatrix::new(random_state(n, seed), ensembles::COMPUTATIONAL).unwrap();
        let b = DensityMatrix::new(random_state(n, seed + 3), ensembles::COMPUTATIONAL).unwrap();
        let d = ensembles::trace_distance(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert!((d - ensembles::trace_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ensembles::trace_distance(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn trace_distance_qubit_closed_form(r1 in prop::array::uniform3(-0.57f64..0.57), r2 in prop::array::uniform3(-0.57f64..0.57)) {
        let bloch = |r: [f64; 3]| -> Op {
            let mut m = Array2::<C64>::zeros((2, 2));
            m[[0, 0]] = c(0.5 * (1.0 + r[2]), 0.0);
            m[[1, 1]] = c(0.5 * (1.0 - r[2]), 0.0);
            m[[0, 1]] = c(0.5 * r[0], -0.5 * r[1]);
            m[[1, 0]] = c(0.5 * r[0], 0.5 * r[1]);
            m
        };
        let d = ensembles::trace_distance_ops(&bloch(r1), &bloch(r2)).unwrap();
        let expect = 0.5 * ((r1[0] - r2[0]).powi(2) + (r1[1] - r2[1]).powi(2) + (r1[2] - r2[2]).powi(2)).sqrt();
        prop_assert!((d - expect).abs() < 1e-12);
    }

    #[test]
    fn canonical_state_matches_series_exponential(n in 2usize..=4, seed in 0u64..1000, beta in -2.0f64..2.0) {
        let h = random_hermitian(n, seed);
        let rho = ensembles::canonical_state(&h, beta).unwrap();
        // exp(-βH) by scaling and squaring of a Taylor series.
        let scaled = h.mapv(|z| z * (-beta / 64.0));
        let mut term = linalg::identity(n);
        let mut e = linalg::identity(n);
        for k in 1..30 {
            term = term.dot(&scaled).mapv(|z| z / k as f64);
            e = &e + &term;
        }
        for _ in 0..6 {
            e = e.dot(&e);
        }
        let tr = linalg::trace(&e);
        let oracle = e.mapv(|z| z / tr);
        prop_assert!(linalg::max_abs_diff(rho.matrix(), &oracle) < 1e-10);
    }

    #[test]
    fn fit_beta_recovers_canonical_beta(n in 2usize..=4, seed in 0u64..1000, beta in -1.5f64..1.5) {
        let h = random_hermitian(n, seed);
        let rho = ensembles::canonical_state(&h, beta).unwrap();
        let fit = ensembles::fit_beta(&rho, &h).unwrap();
        prop_assert!((fit.beta - beta).abs() < 1e-6, "{} vs {}", fit.beta, beta);
    }

    #[test]
    fn gamma_rule_is_antisymmetric(ea in -5.0f64..5.0, eb in -5.0f64..5.0) {
        prop_assume!(ea != eb);
        let forward = renorm::gamma_rule(ea, eb);
        let backward = renorm::gamma_rule(eb, ea);
        prop_assert_ne!(forward, backward);
        let pick = |g: Gamma, a: f64, b: f64| if g == Gamma::Alpha { a } else { b };
        // γ̃ is always the lower of the two levels.
        prop_assert_eq!(pick(forward, ea, eb), ea.min(eb));
        prop_assert_eq!(pick(backward, eb, ea), ea.min(eb));
        prop_assert_eq!(renorm::gamma_rule(ea, ea), Gamma::Alpha);
    }

    #[test]
    fn element_identity(seed in 0u64..200, samples in prop::collection::vec((0usize..2, 0usize..2, 0usize..32, 0usize..32), 8)) {
        let spec = ModelSpec { n_spins_b: 4, seed, epsilon: 0.3, ..ModelSpec::chaotic(4) };
        let hs = build_model(&spec).unwrap();
        let sys = diagonalize(&hs.h_s).unwrap();
        let env = diagonalize(&hs.h_env).unwrap();
        let blocks = renorm::interaction_blocks(&hs, &sys).unwrap();
        let h_int_full = hs.space.embed(&hs.h_int, Factor::SA).unwrap();
        for (a, b, i, j) in samples {
            let left = kron(&sys.vectors.column(a).to_owned().insert_axis(ndarray::Axis(1)), &env.vectors.column(i).to_owned().insert_axis(ndarray::Axis(1)));
            let right = kron(&sys.vectors.column(b).to_owned().insert_axis(ndarray::Axis(1)), &env.vectors.column(j).to_owned().insert_axis(ndarray::Axis(1)));
            let direct = linalg::sandwich(&left.column(0), &h_int_full, &right.column(0));
            let elem = blocks.element(&hs.space, &env, a, b, i, j);
            prop_assert!((direct - elem).norm() < 1e-12);
        }
    }

    #[test]
    fn eth_scan_shift_invariant(seed in 0u64..200, shift in -20.0f64..20.0) {
        let hs = build_model(&ModelSpec { seed, ..ModelSpec::chaotic(4) }).unwrap();
        let env = diagonalize(&hs.h_env).unwrap();
        let shifted_h = &hs.h_env + &linalg::identity(hs.space.n_env()).mapv(|z| z * shift);
        let shifted = diagonalize(&shifted_h).unwrap();
        let obs = &hs.terms.as_ref().unwrap()[0].j_a;
        let w = 0.0937 * env.span();
        let a = diagnostics::eth_scan(&hs.space, &env, obs, "n", w, w, 0.05).unwrap();
        let b = diagnostics::eth_scan(&hs.space, &shifted, obs, "n", w, w, 0.05).unwrap();
        prop_assert_eq!(a.reports.len(), b.reports.len());
        for (x, y) in a.reports.iter().zip(&b.reports) {
            prop_assert_eq!(&x.member_indices, &y.member_indices);
            if x.member_indices.is_empty() {
                continue;
            }
            prop_assert!((x.window_mean - y.window_mean).abs() < 1e-9);
            prop_assert!((x.window_stddev - y.window_stddev).abs() < 1e-9);
            prop_assert_eq!(x.eth_flag, y.eth_flag);
        }
    }

    #[test]
    fn width_populations_sum_to_one(seed in 0u64..100, eps in 0.01f64..0.3) {
        let hs = build_model(&ModelSpec { seed, epsilon: eps, ..ModelSpec::chaotic(3) }).unwrap();
        let sys = diagonalize(&hs.h_s).unwrap();
        let env = diagonalize(&hs.h_env).unwrap();
        let total = diagonalize(&hs.h_total()).unwrap();
        let etas: Vec<usize> = (0..total.len()).step_by(5).collect();
        for w in diagnostics::perturbative_widths(&hs, &total, &sys, &env, &etas, 0.01).unwrap() {
            prop_assert!((w.population_sum - 1.0).abs() < 1e-10);
            prop_assert!(w.measured_width >= 0.0);
        }
    }

    #[test]
    fn minimal_window_matches_brute_force(p in prop::collection::vec(0.0f64..1.0, 2..14), k0 in 0usize..14, eps_p in 0.0f64..0.5) {
        let k0 = k0 % p.len();
        let total: f64 = p.iter().sum();
        prop_assume!(total > 0.0);
        let p: Vec<f64> = p.iter().map(|x| x / total).collect();
        let e0: Vec<f64> = (0..p.len()).map(|k| k as f64 * 0.37 + (k * k) as f64 * 0.01).collect();
        let (k1, k2, width, tail) = diagnostics::minimal_width_window(&p, &e0, k0, eps_p);
        prop_assert!(k1 <= k0 && k0 <= k2);
        prop_assert!(tail <= eps_p + 1e-12);
        prop_assert!((width - (e0[k2] - e0[k1])).abs() < 1e-12);
        let mut best = f64::INFINITY;
        for a in 0..=k0 {
            for b in k0..p.len() {
                let inside: f64 = p[a..=b].iter().sum();
                if 1.0 - inside <= eps_p + 1e-12 {
                    best = best.min(e0[b] - e0[a]);
                }
            }
        }
        prop_assert!((width - best).abs() < 1e-12);
    }

    #[test]
    fn cache_round_trip_is_bitwise(n in 2usize..=12, seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let cache = SpectrumCache::new(dir.path()).unwrap();
        let h = random_hermitian(n, seed);
        let cold = cache.get_or_compute(&h).unwrap();
        let warm = cache.get_or_compute(&h).unwrap();
        let key = spectra::operator_hash(&h);
        prop_assert!(cache.path_for(&key).is_file());
        for (x, y) in cold.values.iter().zip(warm.values.iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in cold.vectors.iter().zip(warm.vectors.iter()) {
            prop_assert_eq!(x.re.to_bits(), y.re.to_bits());
            prop_assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
    }

    #[test]
    fn density_matrices_stay_valid(n in 2usize..=4, seed in 0u64..1000) {
        let rho = DensityMatrix::new(random_state(n, seed), ensembles::COMPUTATIONAL).unwrap();
        let u = diagonalize(&random_hermitian(n, seed + 1)).unwrap().vectors;
        let rotated = rho.rotate(&u, "rotated").unwrap();
        prop_assert!((linalg::trace(rotated.matrix()).re - 1.0).abs() < 1e-12);
        let v = random_vector(n, seed + 2);
        let expectation = linalg::sandwich(&v.view(), rotated.matrix(), &v.view());
        prop_assert!(expectation.re >= -1e-12);
    }
}
