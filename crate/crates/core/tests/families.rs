use proptest::prelude::*;
use qebm::ebm::{EnergyModel, Symmetry};
use qebm::families::{
    Family, InputEncoding, LocalEnergyFn, NeuralParams, PolyParams, SpinEnergy, SymParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Max relative error between the analytic VJP `v . df/dtheta` and central
/// differences of `v . f` with step 1e-5.
fn gradient_error(f: &mut dyn LocalEnergyFn, config: &[u8], v: &[f64]) -> f64 {
    let scalar = |f: &dyn LocalEnergyFn| -> f64 { f.value(config).iter().zip(v).map(|(a, b)| a * b).sum() };
    let mut analytic = vec![0.0; f.num_params()];
    f.backward(config, v, &mut analytic);
    let h = 1e-5;
    let mut numeric = vec![0.0; f.num_params()];
    for k in 0..f.num_params() {
        let orig = f.params()[k];
        f.params_mut()[k] = orig + h;
        let up = scalar(f);
        f.params_mut()[k] = orig - h;
        let down = scalar(f);
        f.params_mut()[k] = orig;
        numeric[k] = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

fn random_config(rng: &mut ChaCha8Rng, n: usize, q: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..q) as u8).collect()
}

fn randomize(f: &mut dyn LocalEnergyFn, rng: &mut ChaCha8Rng, scale: f64) {
    f.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-scale..scale));
}

#[test]
fn poly_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..100 {
        let n = rng.random_range(2..6);
        let q = [2, 3, 4][i % 3];
        let order = rng.random_range(1..4);
        let u = rng.random_range(0..n);
        let mut p = PolyParams::new(u, n, q, order, None).unwrap();
        randomize(&mut p, &mut rng, 1.0);
        let config = random_config(&mut rng, n, q);
        let v: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradient_error(&mut p, &config, &v);
        assert!(err < 1e-5, "instance {i}: rel err {err}");
    }
}

#[test]
fn sym_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let n = rng.random_range(2..8);
        let q = rng.random_range(2..5);
        let mut p = SymParams::new(rng.random_range(0..n), n, q).unwrap();
        randomize(&mut p, &mut rng, 1.0);
        let config = random_config(&mut rng, n, q);
        let v: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradient_error(&mut p, &config, &v);
        assert!(err < 1e-5, "instance {i}: rel err {err}");
    }
}

#[test]
fn neural_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..100 {
        let n = rng.random_range(2..7);
        let q = [2, 4][i % 2];
        let enc = match (q, i % 3) {
            (_, 0) => InputEncoding::Raw,
            (2, _) => InputEncoding::PlusMinus,
            _ => InputEncoding::CenteredOneHot,
        };
        let depth = rng.random_range(0..4);
        let width = rng.random_range(1..9);
        let net = NeuralParams::new(rng.random_range(0..n), n, q, depth, width, enc, rng.random()).unwrap();
        let mut e = if q == 2 && i % 4 == 0 {
            SpinEnergy::symmetrized(Family::Neural(net)).unwrap()
        } else {
            SpinEnergy::new(Family::Neural(net))
        };
        let config = random_config(&mut rng, n, q);
        let v: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradient_error(&mut e, &config, &v);
        assert!(err < 1e-4, "instance {i}: rel err {err}");
    }
}

#[test]
fn spin_flip_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..50 {
        let n = rng.random_range(2..6);
        let mut p = PolyParams::new(rng.random_range(0..n), n, 2, 3, None).unwrap();
        randomize(&mut p, &mut rng, 1.0);
        let mut e = SpinEnergy::symmetrized(Family::Poly(p)).unwrap();
        let config = random_config(&mut rng, n, 2);
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let err = gradient_error(&mut e, &config, &v);
        assert!(err < 1e-5, "instance {i}: rel err {err}");
    }
}

#[test]
fn symmetrized_conditionals_swap_labels_under_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 4;
    let blocks = (0..n)
        .map(|u| {
            let mut p = PolyParams::new(u, n, 2, 3, None).unwrap();
            randomize(&mut p, &mut rng, 1.0);
            SpinEnergy::symmetrized(Family::Poly(p)).unwrap()
        })
        .collect();
    let model = EnergyModel::new(n, 2, Symmetry::None, blocks).unwrap();
    for x in 0..16u8 {
        let config: Vec<u8> = (0..n).map(|k| (x >> k) & 1).collect();
        let flipped: Vec<u8> = config.iter().map(|s| 1 - s).collect();
        for u in 0..n {
            let a = model.conditional(u, &config).unwrap();
            let b = model.conditional(u, &flipped).unwrap();
            assert!((a[0] - b[1]).abs() < 1e-12 && (a[1] - b[0]).abs() < 1e-12);
        }
    }
}

fn sym_model(n: usize, q: usize, seed: u64) -> EnergyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = SymParams::new(0, n, q).unwrap();
    randomize(&mut p, &mut rng, 2.0);
    p.project_gauge();
    EnergyModel::new(n, q, Symmetry::Permutation, vec![SpinEnergy::new(Family::Symmetric(p))]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_models_are_permutation_invariant(
        seed in any::<u64>(),
        config in prop::collection::vec(0u8..3, 5),
        perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        u in 0usize..5,
    ) {
        let model = sym_model(5, 3, seed);
        // moving spin u to perm position keeps its conditional
        let mut permuted = vec![0u8; 5];
        for (k, &p) in perm.iter().enumerate() {
            permuted[p] = config[k];
        }
        let a = model.conditional(u, &config).unwrap();
        let b = model.conditional(perm[u], &permuted).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn conditionals_are_positive_and_normalized(
        seed in any::<u64>(),
        config in prop::collection::vec(0u8..4, 4),
        u in 0usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..4)
            .map(|s| {
                let mut p = PolyParams::new(s, 4, 4, 2, None).unwrap();
                randomize(&mut p, &mut rng, 3.0);
                SpinEnergy::new(Family::Poly(p))
            })
            .collect();
        let model = EnergyModel::new(4, 4, Symmetry::None, blocks).unwrap();
        let p = model.conditional(u, &config).unwrap();
        prop_assert!(p.iter().all(|&x| x > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gauge_projection_zero_sums_outputs(seed in any::<u64>(), config in prop::collection::vec(0u8..3, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut poly = PolyParams::new(2, 4, 3, 3, None).unwrap();
        randomize(&mut poly, &mut rng, 1.0);
        poly.project_gauge();
        prop_assert!(poly.value(&config).iter().sum::<f64>().abs() < 1e-12);
        let mut sym = SymParams::new(1, 4, 3).unwrap();
        randomize(&mut sym, &mut rng, 1.0);
        sym.project_gauge();
        prop_assert!(sym.value(&config).iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn model_json_roundtrip_is_bit_faithful(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..3)
            .map(|s| {
                let mut p = PolyParams::new(s, 3, 2, 3, None).unwrap();
                p.params_mut().iter_mut().for_each(|c| *c = rng.random::<f64>() * 10f64.powi(rng.random_range(-12..4)));
                SpinEnergy::new(Family::Poly(p))
            })
            .collect();
        let model = EnergyModel::new(3, 2, Symmetry::None, blocks).unwrap();
        let back = EnergyModel::from_json_str(&model.to_json_string()).unwrap();
        prop_assert_eq!(back, model);
    }
}
