use qebm::ebm::{EnergyModel, IsingEnergy, Symmetry};
use qebm::families::{Family, LocalEnergyFn, PolyParams, SpinEnergy, SymParams};
use qebm::povm::{build_povm, outcome_distribution, sample_outcomes, PovmKind, ProbTable, DEFAULT_TABLE_CAP};
use qebm::qsim::{build_hamiltonian, ghz_family, thermal_state, GhzVariant, HamiltonianSpec, QuantumState};
use qebm::screen::{fit_model, is_loss_empirical, is_loss_exact, FitConfig, FitData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest deviation between model conditionals and those of the table,
/// over all positive-probability configurations.
fn conditional_error(model: &EnergyModel, mu: &ProbTable) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..mu.len() {
        let config = mu.config_of(i);
        for u in 0..mu.n {
            let mut weights = vec![0.0; mu.q];
            let mut other = config.clone();
            for (a, w) in weights.iter_mut().enumerate() {
                other[u] = a as u8;
                *w = mu.probs[mu.index_of(&other)];
            }
            let z: f64 = weights.iter().sum();
            if z == 0.0 {
                continue;
            }
            let p = model.conditional(u, &config).unwrap();
            for a in 0..mu.q {
                worst = worst.max((p[a] - weights[a] / z).abs());
            }
        }
    }
    worst
}

/// Exact fits checked at the level of conditionals need a tighter gradient
/// tolerance than the default: rarely visited keys carry tiny weight.
fn exact_cfg(base: FitConfig) -> FitConfig {
    FitConfig { tol: 1e-10, ..base }
}

fn random_table(n: usize, q: usize, rng: &mut ChaCha8Rng) -> ProbTable {
    let w: Vec<f64> = (0..q.pow(n as u32)).map(|_| rng.random::<f64>()).collect();
    let z: f64 = w.iter().sum();
    ProbTable::new(n, q, w.iter().map(|x| x / z).collect()).unwrap()
}

fn random_ising(n: usize, rng: &mut ChaCha8Rng) -> IsingEnergy {
    let mut terms = Vec::new();
    for mask in 1..(1u32 << n) {
        let t: Vec<usize> = (0..n).filter(|&k| mask >> k & 1 == 1).collect();
        terms.push((t, rng.random_range(-1.0..1.0)));
    }
    IsingEnergy::new(n, terms).unwrap()
}

#[test]
fn empirical_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for i in 0..20 {
        let n = 4;
        let q = [2, 3][i % 2];
        let table = random_table(n, q, &mut rng);
        let samples = sample_outcomes(&table, 300, i as u64).unwrap();
        let mut p = PolyParams::new(i % n, n, q, 3, None).unwrap();
        p.params_mut().iter_mut().for_each(|c| *c = rng.random_range(-0.5..0.5));
        let base = is_loss_empirical(&p, &samples).unwrap();
        let h = 1e-5;
        for k in 0..p.num_params() {
            let orig = p.params()[k];
            p.params_mut()[k] = orig + h;
            let up = is_loss_empirical(&p, &samples).unwrap().loss;
            p.params_mut()[k] = orig - h;
            let down = is_loss_empirical(&p, &samples).unwrap().loss;
            p.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - base.grad[k]).abs() < 1e-5 * base.grad[k].abs().max(1e-3), "instance {i} param {k}");
        }
    }
}

#[test]
fn convex_families_are_midpoint_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normalized = random_table(4, 3, &mut rng);
    let mut blocks: Vec<SpinEnergy> = vec![
        SpinEnergy::new(Family::Poly(PolyParams::new(1, 4, 3, 3, None).unwrap())),
        SpinEnergy::new(Family::Symmetric(SymParams::new(2, 4, 3).unwrap())),
    ];
    for e in blocks.iter_mut() {
        for _ in 0..100 {
            let a: Vec<f64> = (0..e.num_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..e.num_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut loss_at = |x: &[f64]| {
                e.params_mut().copy_from_slice(x);
                is_loss_exact(e, &normalized).unwrap().loss
            };
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let (la, lb, lm) = (loss_at(&a), loss_at(&b), loss_at(&mid));
            assert!(lm <= 0.5 * (la + lb) + 1e-10);
        }
    }
}

#[test]
fn exact_fits_reproduce_small_binary_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for n in 2..=4 {
        for _ in 0..3 {
            let e = random_ising(n, &mut rng);
            let mu = e.distribution().unwrap();
            let (model, report) = fit_model(FitData::Exact(&mu), &exact_cfg(FitConfig::poly(n)), Symmetry::None).unwrap();
            assert_eq!(report.spins.len(), n);
            let err = conditional_error(&model, &mu);
            assert!(err < 1e-6, "n={n}: {err}");
        }
    }
}

fn tim_outcomes(n: usize, beta: f64, kind: PovmKind) -> ProbTable {
    let h = build_hamiltonian(&HamiltonianSpec::tim_chain(n, -1.0, 1.0, false)).unwrap();
    let rho = thermal_state(&h, beta).unwrap();
    outcome_distribution(&QuantumState::Mixed(rho), &build_povm(kind), DEFAULT_TABLE_CAP).unwrap()
}

#[test]
fn higher_order_never_increases_exact_loss() {
    let mu = tim_outcomes(5, 1.0, PovmKind::Computational);
    let (_, r2) = fit_model(FitData::Exact(&mu), &FitConfig::poly(2), Symmetry::None).unwrap();
    let (_, r3) = fit_model(FitData::Exact(&mu), &FitConfig::poly(3), Symmetry::None).unwrap();
    for (a, b) in r2.spins.iter().zip(&r3.spins) {
        assert!(b.loss <= a.loss + 1e-12, "spin {}: {} > {}", a.spin, b.loss, a.loss);
    }
}

#[test]
fn symmetric_fit_on_ghz_table() {
    let ghz = ghz_family(4, GhzVariant::Plus).unwrap();
    let mu = outcome_distribution(&ghz, &build_povm(PovmKind::Tetrahedral), DEFAULT_TABLE_CAP).unwrap();
    let (model, report) = fit_model(FitData::Exact(&mu), &exact_cfg(FitConfig::symmetric()), Symmetry::Permutation).unwrap();
    assert_eq!(report.spins.len(), 1);
    assert_eq!(model.blocks().len(), 1);
    let err = conditional_error(&model, &mu);
    assert!(err < 1e-6, "{err}");

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let config: Vec<u8> = (0..4).map(|_| rng.random_range(0..4u8)).collect();
        let mut perm: Vec<usize> = (0..4).collect();
        for k in (1..4).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        let permuted: Vec<u8> = perm.iter().map(|&p| config[p]).collect();
        let u = perm.iter().position(|&p| p == 0).unwrap();
        assert_eq!(model.conditional(0, &config).unwrap(), model.conditional(u, &permuted).unwrap());
    }
}

#[test]
fn translation_shares_one_block() {
    let n = 5;
    let terms = (0..n).map(|i| (vec![i, (i + 1) % n], 0.6)).collect();
    let mu = IsingEnergy::new(n, terms).unwrap().distribution().unwrap();
    let (model, report) = fit_model(FitData::Exact(&mu), &exact_cfg(FitConfig::poly(2)), Symmetry::Translation).unwrap();
    assert_eq!(report.spins.len(), 1);
    for u in 0..n {
        let mut config = vec![0u8; n];
        config[(u + 1) % n] = 1;
        // local energy of spin u seen from its right neighbour is the same for every u
        assert_eq!(model.local_energy(u, &config), model.local_energy(0, &{
            let mut c = vec![0u8; n];
            c[1] = 1;
            c
        }));
    }
    assert!(conditional_error(&model, &mu) < 1e-6);
}

#[test]
fn empirical_fit_recovers_coupling() {
    let mu = IsingEnergy::new(2, vec![(vec![0, 1], 0.5)]).unwrap().distribution().unwrap();
    let m = 100_000;
    for seed in 0..5 {
        let s = sample_outcomes(&mu, m, seed).unwrap();
        let (model, _) = fit_model(FitData::Samples(&s), &FitConfig::poly(2), Symmetry::None).unwrap();
        let Family::Poly(p) = &model.blocks()[0].family else { unreachable!() };
        let j = p.ising_coefficient(&[1]).unwrap();
        assert!((j - 0.5).abs() < 5.0 / (m as f64).sqrt(), "seed {seed}: {j}");
    }
}
