use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skipabsorb_core::absorption::DEFAULT_TOLERANCE;
use skipabsorb_core::approx::{fit_approximate, ApproxConfig, ApproxInit};
use skipabsorb_core::sampling::{SamplerConfig, Sampling};
use skipabsorb_core::verification::{
    algebraic_absorption_check, homogeneity_check, ALGEBRAIC_TOLERANCE,
};
use skipabsorb_core::*;

const SHAPES: [(usize, usize, usize); 5] = [(1, 1, 1), (2, 3, 2), (2, 4, 3), (3, 6, 3), (4, 8, 5)];

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    prop::sample::select(SHAPES.to_vec())
}

fn act() -> impl Strategy<Value = ActivationKind> {
    prop::sample::select(vec![ActivationKind::Relu, ActivationKind::Gelu])
}

fn parts(b: &Block) -> (Matrix, Matrix) {
    match b.kind() {
        BlockKind::Ungated { w_up, w_down, .. } => (w_up.clone(), w_down.clone()),
        BlockKind::Gated { .. } => unreachable!(),
    }
}

fn gaussian_block(d: usize, n: usize, act: ActivationKind, skip: Skip, seed: u64) -> Block {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let up = Matrix::random_normal(n, d, &mut rng);
    let down = Matrix::random_normal(d, n, &mut rng);
    Block::ungated(up, down, act, skip).unwrap()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn parity_split_holds(z in -50.0f64..50.0, kind in act()) {
        let scale = 1.0 + z.abs();
        let e = kind.even_part(z).unwrap();
        prop_assert!((kind.value(z) - (e + z / 2.0)).abs() <= 1e-12 * scale);
        prop_assert!((kind.value(z) - kind.value(-z) - z).abs() <= 1e-12 * scale);
        prop_assert!((e - kind.even_part(-z).unwrap()).abs() <= 1e-13 * scale);
    }

    #[test]
    fn gelu_derivative_matches_central_difference(z in -10.0f64..10.0) {
        let h = 1e-5;
        let g = ActivationKind::Gelu;
        let fd = (g.value(z + h) - g.value(z - h)) / (2.0 * h);
        let exact = g.derivative(z);
        prop_assert!((fd - exact).abs() <= 1e-7 * exact.abs().max(1e-3));
    }

    #[test]
    fn matrices_round_trip_through_json(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::random_normal(rows, cols, &mut rng).scale(1e3);
        let text = serde_json::to_string(&m).unwrap();
        let back: Matrix = serde_json::from_str(&text).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn found_certificates_are_sound(seed in any::<u64>(), (d, n, m) in shape(), planted in any::<bool>()) {
        let (w_up, w_down) = if planted {
            parts(&plant_instance(&PlantConfig::new(d, n, m, ActivationKind::Relu, seed)).unwrap().0)
        } else {
            parts(&gaussian_block(d, n, ActivationKind::Relu, Skip::Identity, seed))
        };
        let limits = SearchLimits::default();
        let found = find_absorbing_subset(&w_up, &w_down, &Target::NegIdentity, &limits).unwrap();
        if planted {
            prop_assert!(found.is_some());
        }
        if let Some(cert) = found {
            prop_assert!(cert.passed);
            prop_assert!(cert.subset.len() >= d);
            let again = check_subset_product(&w_up, &w_down, &cert.subset, &Target::NegIdentity, limits.tolerance).unwrap();
            prop_assert!(again.passed);
            prop_assert_eq!(again.residual, cert.residual);
        }
    }

    #[test]
    fn search_is_deterministic(seed in any::<u64>(), (d, n, m) in shape()) {
        let (w_up, w_down) = parts(&plant_instance(&PlantConfig::new(d, n, m, ActivationKind::Gelu, seed)).unwrap().0);
        let limits = SearchLimits::default();
        let a = find_absorbing_subset(&w_up, &w_down, &Target::NegIdentity, &limits).unwrap();
        let b = find_absorbing_subset(&w_up, &w_down, &Target::NegIdentity, &limits).unwrap();
        prop_assert_eq!(a, b);
        let c = best_subset(&w_up, &w_down, &Target::NegIdentity, &limits).unwrap();
        prop_assert_eq!(c, best_subset(&w_up, &w_down, &Target::NegIdentity, &limits).unwrap());
    }

    #[test]
    fn planting_is_deterministic(seed in any::<u64>(), (d, n, m) in shape(), kind in act()) {
        let cfg = PlantConfig::new(d, n, m, kind, seed);
        prop_assert_eq!(plant_instance(&cfg).unwrap(), plant_instance(&cfg).unwrap());
    }

    #[test]
    fn construction_is_exact(seed in any::<u64>(), (d, n, m) in shape(), kind in act()) {
        let (w, cert) = plant_instance(&PlantConfig::new(d, n, m, kind, seed)).unwrap();
        let v = construct_absorbed(&w, &cert.subset).unwrap();
        let normal = functional_equality(&w, &v, &SamplerConfig::standard_normal(2_000, seed, 1e-8)).unwrap();
        prop_assert!(normal.passed, "{:?}", normal);
        if kind == ActivationKind::Relu {
            let cfg = SamplerConfig { count: 200, ..SamplerConfig::near_kinks(seed, 1e-8) };
            let kinks = functional_equality(&w, &v, &cfg).unwrap();
            prop_assert!(kinks.passed, "{:?}", kinks);
        }
        let (w_up, w_down) = parts(&w);
        let (v_up, v_down) = parts(&v);
        let r1 = v_down.matmul(&v_up).unwrap()
            .sub(&w_down.matmul(&w_up).unwrap()).unwrap()
            .sub(&Matrix::identity(d).scale(2.0)).unwrap()
            .frobenius_norm();
        prop_assert!(r1 <= 1e-9 * (1.0 + w_down.frobenius_norm() * w_up.frobenius_norm()));
    }

    #[test]
    fn algebraic_pass_implies_functional_pass(seed in any::<u64>(), (d, n, m) in shape(), kind in act(), tamper in 0usize..3) {
        let (w, cert) = plant_instance(&PlantConfig::new(d, n, m, kind, seed)).unwrap();
        let v = construct_absorbed(&w, &cert.subset).unwrap();
        // 0: untouched, 1: skip ignored, 2: one down column perturbed
        let v = match tamper {
            0 => v,
            1 => w.with_skip(Skip::None).unwrap(),
            _ => {
                let (_, vd) = parts(&v);
                v.with_w_down(Matrix::from_fn(d, n, |i, j| vd.get(i, j) + if j == 0 { 1e-3 } else { 0.0 })).unwrap()
            }
        };
        let alg = algebraic_absorption_check(&w, &v, ALGEBRAIC_TOLERANCE).unwrap();
        let func = functional_equality(&w, &v, &SamplerConfig::standard_normal(2_000, seed, 1e-8)).unwrap();
        if alg.passed {
            prop_assert!(func.passed);
        }
        if tamper == 0 {
            prop_assert!(alg.passed);
        }
    }

    #[test]
    fn near_kink_residuals_stay_at_rounding_level(seed in any::<u64>(), (d, n, m) in shape()) {
        let (w, cert) = plant_instance(&PlantConfig::new(d, n, m, ActivationKind::Relu, seed)).unwrap();
        let v = construct_absorbed(&w, &cert.subset).unwrap();
        let normal = functional_equality(&w, &v, &SamplerConfig::standard_normal(2_000, seed, 1e-8)).unwrap();
        let cfg = SamplerConfig { count: 200, ..SamplerConfig::near_kinks(seed, 1e-8) };
        let kinks = functional_equality(&w, &v, &cfg).unwrap();
        // Both maxima are rounding noise; allow that much slack in the comparison.
        prop_assert!(kinks.max_residual <= normal.max_residual + 1e-12);
    }

    #[test]
    fn invertible_skip_round_trip(seed in any::<u64>(), (d, n, m) in shape(), kind in act()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let skip = Matrix::random_normal(d, d, &mut rng).add(&Matrix::identity(d).scale(3.0)).unwrap();
        prop_assume!(skip.condition_number() < 1e4);
        let (reduced_target, _) = plant_instance(&PlantConfig::new(d, n, m, kind, seed)).unwrap();
        let original = reduced_target
            .with_w_down(skip.matmul(reduced_target.w_down()).unwrap()).unwrap()
            .with_skip(Skip::General(skip.clone())).unwrap();
        let reduced = reduce_invertible_skip(&original).unwrap();
        let (up, down) = parts(&reduced);
        let cert = find_absorbing_subset(&up, &down, &Target::NegIdentity, &SearchLimits::default())
            .unwrap()
            .expect("planted subset survives the reduction");
        let v = construct_absorbed(&reduced, &cert.subset).unwrap();
        let lifted = lift_reduced_solution(&v, &skip).unwrap();
        let r = functional_equality(&original, &lifted, &SamplerConfig::standard_normal(2_000, seed, 1e-8)).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn homogeneous_blocks(seed in any::<u64>(), d in 1usize..5, extra in 0usize..4) {
        let n = d + extra;
        let cfg = SamplerConfig::standard_normal(200, seed, 1e-10);
        let sq = gaussian_block(d, n, ActivationKind::ReluSquared, Skip::None, seed);
        prop_assert!(homogeneity_check(&sq, 2.0, &cfg).unwrap().passed);
        let relu = gaussian_block(d, n, ActivationKind::Relu, Skip::None, seed);
        prop_assert!(homogeneity_check(&relu, 1.0, &cfg).unwrap().passed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reglu = Block::gated(
            Matrix::random_normal(n, d, &mut rng),
            Matrix::random_normal(n, d, &mut rng),
            Matrix::random_normal(d, n, &mut rng),
            ActivationKind::Relu,
            Skip::None,
        ).unwrap();
        prop_assert!(homogeneity_check(&reglu, 2.0, &cfg).unwrap().passed);
    }

    #[test]
    fn skip_shows_up_as_a_linear_term(seed in any::<u64>(), d in 1usize..5, extra in 0usize..4) {
        let n = d + extra;
        let f = gaussian_block(d, n, ActivationKind::ReluSquared, Skip::Identity, seed);
        let g = gaussian_block(d, n, ActivationKind::ReluSquared, Skip::None, seed.wrapping_add(1));
        let lambda = 1e-3;
        for x in skipabsorb_core::sampling::standard_normal_vectors(20, d, seed) {
            let lx: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            let diff: Vec<f64> = f.eval_slice(&lx).unwrap().iter().zip(g.eval_slice(&lx).unwrap()).map(|(a, b)| a - b).collect();
            let ratio = l2(&diff) / lambda / l2(&x);
            prop_assert!((0.5..=2.0).contains(&ratio), "ratio {}", ratio);
        }
    }

    #[test]
    fn reports_are_deterministic(seed in any::<u64>(), (d, n, m) in shape()) {
        let (w, cert) = plant_instance(&PlantConfig::new(d, n, m, ActivationKind::Relu, seed)).unwrap();
        let v = construct_absorbed(&w, &cert.subset).unwrap();
        let cfg = SamplerConfig { count: 500, distribution: Sampling::StandardNormal, seed, tolerance: 1e-8 };
        prop_assert_eq!(functional_equality(&w, &v, &cfg).unwrap(), functional_equality(&w, &v, &cfg).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn approximate_fit_invariants(seed in any::<u64>(), kind in act(), planted in any::<bool>()) {
        let (w, init) = if planted {
            let (w, cert) = plant_instance(&PlantConfig::new(2, 4, 3, kind, seed)).unwrap();
            (w, ApproxInit::SignFlips(cert.subset))
        } else {
            (gaussian_block(2, 4, kind, Skip::Identity, seed), ApproxInit::FromWeights)
        };
        let (up, down) = parts(&w);
        let scale = 1.0 + up.frobenius_norm().powi(2) + down.frobenius_norm().powi(2);
        let cfg = ApproxConfig { sample_count: 256, max_iters: 40, seed, init, ..ApproxConfig::default() };
        let r = fit_approximate(&w, &cfg).unwrap();
        for &i in &r.solve_iterations[1..] {
            prop_assert!(r.objective_trace[i] <= r.objective_trace[i - 1] + 1e-12 * scale);
        }
        if kind == ActivationKind::Gelu {
            prop_assert!(r.grad_check <= 1e-5, "grad check {}", r.grad_check);
        }
        if planted {
            prop_assert!(r.final_objective <= 1e-12 * scale);
        }
        prop_assert_eq!(&r, &fit_approximate(&w, &cfg).unwrap());
    }
}

#[test]
fn negated_skip_turns_the_converse_problem_into_the_standard_one() {
    // x + MLP2(x) = MLP1(x) rearranges to (-I) x + MLP1(x) = MLP2(x).
    let mlp1 = gaussian_block(
        3,
        5,
        ActivationKind::Gelu,
        Skip::General(Matrix::identity(3).scale(-1.0)),
        4,
    );
    let reduced = reduce_invertible_skip(&mlp1).unwrap();
    assert_eq!(*reduced.skip(), Skip::Identity);
    assert_eq!(*reduced.w_down(), mlp1.w_down().scale(-1.0));
    let id = gaussian_block(3, 5, ActivationKind::Gelu, Skip::Identity, 4);
    assert_eq!(reduce_invertible_skip(&id).unwrap(), id);
}

#[test]
fn tolerance_constant_is_the_documented_default() {
    assert_eq!(DEFAULT_TOLERANCE, 1e-9);
    assert_eq!(SearchLimits::default().max_hidden_width, 24);
}
