//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use qebm::ebm::{gibbs_sample, EnergyModel, GibbsConfig, IsingEnergy, Symmetry};
use qebm::estimate::{
    estimate_fidelity, estimate_observable, estimate_reduced_state, order_strength, trace_distance, tvd,
    tvd_with_floor, ObservableSpec,
};
use qebm::families::{
    poly_param_count, Family, InputEncoding, LocalEnergyFn, NeuralParams, PolyParams, SpinEnergy, SymParams,
};
use qebm::povm::{
    build_povm, dual_operators, outcome_distribution, sample_outcomes, sample_state, PovmKind, ProbTable,
    DEFAULT_TABLE_CAP,
};
use qebm::qsim::{
    build_hamiltonian, ghz_family, ground_state, thermal_state, DensityMatrix, GhzVariant, HamiltonianSpec,
    QuantumState,
};
use qebm::screen::{fit_model, FitConfig, FitData};
use qebm::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn spins(config: &[u8]) -> impl Iterator<Item = f64> + '_ {
    config.iter().map(|&x| if x == 0 { 1.0 } else { -1.0 })
}

/// `mu ~ exp(E)` enumerated directly from an all-orders binary energy.
fn binary_table(n: usize, terms: &[(Vec<usize>, f64)]) -> ProbTable {
    let size = 1usize << n;
    let energy: Vec<f64> = (0..size)
        .map(|x| {
            let s: Vec<f64> = spins(&(0..n).map(|k| ((x >> k) & 1) as u8).collect::<Vec<_>>()).collect();
            terms.iter().map(|(t, c)| c * t.iter().map(|&i| s[i]).product::<f64>()).sum()
        })
        .collect();
    let top = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = energy.iter().map(|e| (e - top).exp()).collect();
    let z: f64 = w.iter().sum();
    ProbTable::new(n, 2, w.iter().map(|x| x / z).collect()).unwrap()
}

/// Largest gap between model conditionals and brute-force conditionals of `mu`.
fn conditional_error(model: &EnergyModel, mu: &ProbTable) -> f64 {
    let mut worst: f64 = 0.0;
    for x in 0..mu.len() {
        let config = mu.config_of(x);
        for u in 0..mu.n {
            let mut w = vec![0.0; mu.q];
            let mut other = config.clone();
            for (a, wa) in w.iter_mut().enumerate() {
                other[u] = a as u8;
                *wa = mu.probs[mu.index_of(&other)];
            }
            let z: f64 = w.iter().sum();
            let p = model.conditional(u, &config).unwrap();
            for a in 0..mu.q {
                worst = worst.max((p[a] - w[a] / z).abs());
            }
        }
    }
    worst
}

fn random_density(n: usize, rng: &mut ChaCha8Rng) -> DensityMatrix {
    let dim = 1 << n;
    let g = DMatrix::<C64>::from_fn(dim, dim, |_, _| {
        C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let rho = &g * g.adjoint();
    let tr = rho.trace();
    DensityMatrix::new(rho / tr).unwrap()
}

fn criterion_1() -> Outcome {
    let kinds = [PovmKind::Computational, PovmKind::Tetrahedral, PovmKind::RotatedTetrahedral { seed: 17 }];
    let completeness = kinds.iter().map(|&k| build_povm(k).completeness_error()).fold(0.0, f64::max);

    let povm = build_povm(PovmKind::Tetrahedral);
    let duals = dual_operators(&povm).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut recon: f64 = 0.0;
    for k in 0..20 {
        let n = 1 + k % 3;
        let rho = random_density(n, &mut rng);
        let mu = outcome_distribution(&QuantumState::Mixed(rho.clone()), &povm, DEFAULT_TABLE_CAP).unwrap();
        let dim = 1 << n;
        let mut est = DMatrix::<C64>::zeros(dim, dim);
        for (x, &p) in mu.probs.iter().enumerate() {
            let config = mu.config_of(x);
            for r in 0..dim {
                for c in 0..dim {
                    let mut v = C64::new(p, 0.0);
                    for (i, &t) in config.iter().enumerate() {
                        v *= duals.duals[t as usize][((r >> i) & 1, (c >> i) & 1)];
                    }
                    est[(r, c)] += v;
                }
            }
        }
        let err = (est - rho.data()).iter().fold(0.0f64, |a, z| a.max(z.norm()));
        recon = recon.max(err);
    }
    outcome(
        completeness < 1e-12 && recon < 1e-9,
        format!("completeness {completeness:.1e} (< 1e-12), reconstruction {recon:.1e} (< 1e-9)"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=4);
        let terms: Vec<(Vec<usize>, f64)> = (1..(1u32 << n))
            .map(|mask| ((0..n).filter(|&k| mask >> k & 1 == 1).collect(), rng.random_range(-1.0..1.0)))
            .collect();
        let mu = binary_table(n, &terms);
        let cfg = FitConfig { tol: 1e-10, ..FitConfig::poly(n) };
        let (model, _) = fit_model(FitData::Exact(&mu), &cfg, Symmetry::None).unwrap();
        worst = worst.max(conditional_error(&model, &mu));
    }

    let m = 100_000;
    let bound = 5.0 / (m as f64).sqrt();
    let mu = binary_table(2, &[(vec![0, 1], 0.5)]);
    let mut hits = 0;
    for seed in 0..40 {
        let s = sample_outcomes(&mu, m, 1000 + seed).unwrap();
        let (model, _) = fit_model(FitData::Samples(&s), &FitConfig::poly(2), Symmetry::None).unwrap();
        let ok = model.blocks().iter().enumerate().all(|(u, b)| {
            let Family::Poly(p) = &b.family else { unreachable!() };
            (p.ising_coefficient(&[1 - u]).unwrap() - 0.5).abs() < bound
        });
        hits += ok as usize;
    }
    outcome(
        worst < 1e-6 && hits * 100 >= 95 * 40,
        format!("exact conditional error {worst:.1e} (< 1e-6), J within 5/sqrt(m) in {hits}/40 seeds (>= 38)"),
    )
}

fn gradient_error(f: &mut dyn LocalEnergyFn, config: &[u8], v: &[f64]) -> f64 {
    let scalar = |f: &dyn LocalEnergyFn| -> f64 { f.value(config).iter().zip(v).map(|(a, b)| a * b).sum() };
    let mut analytic = vec![0.0; f.num_params()];
    f.backward(config, v, &mut analytic);
    let h = 1e-5;
    let mut diff = 0.0;
    for k in 0..f.num_params() {
        let orig = f.params()[k];
        f.params_mut()[k] = orig + h;
        let up = scalar(f);
        f.params_mut()[k] = orig - h;
        let down = scalar(f);
        f.params_mut()[k] = orig;
        diff += ((up - down) / (2.0 * h) - analytic[k]).powi(2);
    }
    diff.sqrt() / analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 3];
    for i in 0..100 {
        let n = rng.random_range(2..6);
        let q = [2, 3, 4][i % 3];
        let mut p = PolyParams::new(rng.random_range(0..n), n, q, rng.random_range(1..4), None).unwrap();
        p.params_mut().iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        let config: Vec<u8> = (0..n).map(|_| rng.random_range(0..q) as u8).collect();
        let v: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst[0] = worst[0].max(gradient_error(&mut p, &config, &v));

        let n = rng.random_range(2..8);
        let q = rng.random_range(2..5);
        let mut s = SymParams::new(rng.random_range(0..n), n, q).unwrap();
        s.params_mut().iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        let config: Vec<u8> = (0..n).map(|_| rng.random_range(0..q) as u8).collect();
        let v: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst[1] = worst[1].max(gradient_error(&mut s, &config, &v));

        let n = rng.random_range(2..7);
        let q = [2, 4][i % 2];
        let enc = if i % 3 == 0 { InputEncoding::Raw } else { InputEncoding::default_for(q) };
        let net = NeuralParams::new(rng.random_range(0..n), n, q, rng.random_range(0..4), rng.random_range(1..9), enc, rng.random())
            .unwrap();
        let mut e = SpinEnergy::new(Family::Neural(net));
        let config: Vec<u8> = (0..n).map(|_| rng.random_range(0..q) as u8).collect();
        let v: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst[2] = worst[2].max(gradient_error(&mut e, &config, &v));
    }
    outcome(
        worst[0] < 1e-5 && worst[1] < 1e-5 && worst[2] < 1e-4,
        format!("max rel err poly {:.1e}, sym {:.1e} (< 1e-5), nn {:.1e} (< 1e-4)", worst[0], worst[1], worst[2]),
    )
}

fn tim_table(n: usize, beta: f64, kind: PovmKind) -> ProbTable {
    let h = build_hamiltonian(&HamiltonianSpec::tim_chain(n, -1.0, 1.0, false)).unwrap();
    let rho = thermal_state(&h, beta).unwrap();
    outcome_distribution(&QuantumState::Mixed(rho), &build_povm(kind), DEFAULT_TABLE_CAP).unwrap()
}

fn strengths(mu: &ProbTable) -> BTreeMap<usize, f64> {
    let (model, _) = fit_model(FitData::Exact(mu), &FitConfig::poly(3), Symmetry::None).unwrap();
    order_strength(&model).unwrap()
}

/// Frozen from a one-time oracle run (largest observed ratio 3.6e-10).
const ORDER3_RATIO_MAX: f64 = 1e-8;
/// Frozen from a one-time oracle run (observed 0.306).
const TETRA_ORDER3_MIN: f64 = 0.15;

fn criterion_4() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for beta in [0.5, 1.0, 2.0] {
        let s = strengths(&tim_table(5, beta, PovmKind::Computational));
        let ratio = s[&3] / s[&2];
        pass &= s[&2] > s[&1] && s[&2] > s[&3] && ratio < ORDER3_RATIO_MAX;
        parts.push(format!("beta={beta}: s1 {:.1e} s2 {:.3} s3 {:.1e}", s[&1], s[&2], s[&3]));
    }
    outcome(pass, format!("{} (s3/s2 < {ORDER3_RATIO_MAX:e})", parts.join("; ")))
}

fn criterion_5() -> Outcome {
    let comp = strengths(&tim_table(5, 1.0, PovmKind::Computational))[&3];
    let tet = strengths(&tim_table(5, 1.0, PovmKind::Tetrahedral))[&3];
    outcome(
        tet > 10.0 * comp && tet >= TETRA_ORDER3_MIN,
        format!("tetrahedral s3 {tet:.3} vs computational s3 {comp:.1e} (> 10x, >= {TETRA_ORDER3_MIN})"),
    )
}

fn criterion_6() -> Outcome {
    let povm = build_povm(PovmKind::Tetrahedral);
    let duals = dual_operators(&povm).unwrap();
    let QuantumState::Pure(target) = ghz_family(4, GhzVariant::Plus).unwrap() else { unreachable!() };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (k, p) in [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().enumerate() {
        let state = ghz_family(4, GhzVariant::Mixture(p)).unwrap();
        let s = sample_state(&state, &povm, 60_000, 600 + k as u64, DEFAULT_TABLE_CAP).unwrap();
        let (model, _) = fit_model(FitData::Samples(&s), &FitConfig::symmetric(), Symmetry::Permutation).unwrap();
        let draws = gibbs_sample(&model, &GibbsConfig::new(400_000, 610 + k as u64)).unwrap();
        let f = estimate_fidelity(&draws, &duals, &target).unwrap().mean;
        worst = worst.max((f - (1.0 - p)).abs());
        parts.push(format!("{f:.3}"));
    }
    outcome(worst < 0.05, format!("fidelities [{}], max |F - (1-p)| {worst:.3} (< 0.05)", parts.join(", ")))
}

fn criterion_7() -> Outcome {
    let povm = build_povm(PovmKind::Tetrahedral);
    let table = outcome_distribution(&ghz_family(5, GhzVariant::Plus).unwrap(), &povm, DEFAULT_TABLE_CAP).unwrap();
    let s = sample_outcomes(&table, 100_000, 700).unwrap();
    let (model, _) = fit_model(FitData::Samples(&s), &FitConfig::symmetric(), Symmetry::Permutation).unwrap();
    let draws = gibbs_sample(&model, &GibbsConfig::new(400_000, 701)).unwrap();
    let (t, floor) = tvd_with_floor(&draws, &table, 702).unwrap();
    outcome(t <= 1.5 * floor, format!("TVD {t:.4}, floor {floor:.4}, ratio {:.3} (<= 1.5)", t / floor))
}

fn criterion_8() -> Outcome {
    let n = 8;
    let h = build_hamiltonian(&HamiltonianSpec::tim_chain(n, -1.0, 1.0, false)).unwrap();
    let rho = thermal_state(&h, 1.0).unwrap();
    let diag: Vec<f64> = rho.data().diagonal().iter().map(|z| z.re).collect();
    let state = QuantumState::Mixed(rho);
    let povm = build_povm(PovmKind::Computational);
    let duals = dual_operators(&povm).unwrap();
    let s = sample_state(&state, &povm, 100_000, 800, DEFAULT_TABLE_CAP).unwrap();
    let (model, _) = fit_model(FitData::Samples(&s), &FitConfig::poly(2), Symmetry::None).unwrap();
    let draws = gibbs_sample(&model, &GibbsConfig::new(400_000, 801)).unwrap();
    let mut mae = 0.0;
    for i in 0..n - 1 {
        let exact: f64 = diag
            .iter()
            .enumerate()
            .map(|(x, p)| if ((x >> i) ^ (x >> (i + 1))) & 1 == 0 { *p } else { -p })
            .sum();
        let label: String = (0..n).map(|k| if k == i || k == i + 1 { 'Z' } else { 'I' }).collect();
        let est = estimate_observable(&draws, &duals, &ObservableSpec::Pauli(label)).unwrap().mean;
        mae += (est - exact).abs() / (n - 1) as f64;
    }
    outcome(mae <= 0.05, format!("nearest-neighbour ZZ mean abs error {mae:.4} (<= 0.05)"))
}

fn criterion_9() -> Outcome {
    let terms = vec![
        (vec![0], 0.3),
        (vec![1], -0.5),
        (vec![2], 0.2),
        (vec![0, 1], 0.8),
        (vec![1, 2], -0.6),
        (vec![0, 2], 0.4),
        (vec![0, 1, 2], 0.25),
    ];
    let mu = binary_table(3, &terms);
    let model = IsingEnergy::new(3, terms).unwrap().to_model().unwrap();

    // mu(x) P_u(x -> y) = mu(y) P_u(y -> x) for every single-site move
    let mut balance: f64 = 0.0;
    for x in 0..8 {
        let cx = mu.config_of(x);
        for u in 0..3 {
            let mut cy = cx.clone();
            cy[u] = 1 - cy[u];
            let y = mu.index_of(&cy);
            let forward = mu.probs[x] * model.conditional(u, &cx).unwrap()[cy[u] as usize];
            let backward = mu.probs[y] * model.conditional(u, &cy).unwrap()[cx[u] as usize];
            balance = balance.max((forward - backward).abs());
        }
    }

    let cfg = GibbsConfig { burn_in: Some(100), thin: Some(5), ..GibbsConfig::new(1_000_000, 900) };
    let draws = gibbs_sample(&model, &cfg).unwrap();
    let mut hist = [0.0; 8];
    for row in draws.rows() {
        hist[mu.index_of(row)] += 1.0 / draws.m() as f64;
    }
    let t = tvd(&hist, &mu.probs);
    outcome(t < 0.01 && balance < 1e-10, format!("TVD {t:.4} (< 0.01), detailed balance {balance:.1e} (< 1e-10)"))
}

/// Two-site reduced state of a pure state; `i` is bit 0 and `j` bit 1.
fn pair_state(amps: &[C64], n: usize, i: usize, j: usize) -> DMatrix<C64> {
    let mut out = DMatrix::zeros(4, 4);
    let place = |rest: usize, r: usize| -> usize {
        let mut x = 0;
        let mut k = 0;
        for site in 0..n {
            let bit = if site == i {
                r & 1
            } else if site == j {
                (r >> 1) & 1
            } else {
                let b = (rest >> k) & 1;
                k += 1;
                b
            };
            x |= bit << site;
        }
        x
    };
    for rest in 0..1 << (n - 2) {
        for r in 0..4 {
            for c in 0..4 {
                out[(r, c)] += amps[place(rest, r)] * amps[place(rest, c)].conj();
            }
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let n = 8;
    let povm = build_povm(PovmKind::Tetrahedral);
    let duals = dual_operators(&povm).unwrap();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut err = BTreeMap::new();
    for g in [0.5, 2.0] {
        let h = build_hamiltonian(&HamiltonianSpec::tim_chain(n, 1.0, g, false)).unwrap();
        let psi = ground_state(&h, 1e-9).unwrap();
        let amps: Vec<C64> = psi.amplitudes().iter().cloned().collect();
        let state = QuantumState::Pure(psi);
        for m in [10_000, 100_000] {
            let s = sample_state(&state, &povm, m, 5, DEFAULT_TABLE_CAP).unwrap();
            let cfg = FitConfig { max_epochs: 300, validation_fraction: 0.1, seed: 1, ..FitConfig::neural(3, 15) };
            let (model, _) = fit_model(FitData::Samples(&s), &cfg, Symmetry::None).unwrap();
            let draws = gibbs_sample(&model, &GibbsConfig::new(400_000, 9)).unwrap();
            let mean = pairs
                .iter()
                .map(|&(i, j)| {
                    let est = estimate_reduced_state(&draws, &duals, &[i, j]).unwrap();
                    trace_distance(&est, &pair_state(&amps, n, i, j)).unwrap()
                })
                .sum::<f64>()
                / pairs.len() as f64;
            err.insert((g.to_string(), m), mean);
        }
    }
    let e = |g: &str, m: usize| err[&(g.to_string(), m)];
    outcome(
        e("2", 100_000) < e("2", 10_000) && e("2", 100_000) < e("0.5", 100_000),
        format!(
            "g=2: {:.4} -> {:.4}; g=0.5: {:.4} -> {:.4} (m = 1e4 -> 1e5)",
            e("2", 10_000),
            e("2", 100_000),
            e("0.5", 10_000),
            e("0.5", 100_000)
        ),
    )
}

fn criterion_11() -> Outcome {
    let count = poly_param_count(30, 2, 2);
    let built: usize = (0..30).map(|u| PolyParams::new(u, 30, 2, 2, None).unwrap().num_params()).sum();
    outcome(count == 900 && built == 900, format!("n=30 q=2 L=2 parameters {count}, built {built} (== 900)"))
}

fn main() {
    let criteria: [(fn() -> Outcome, u64); 11] = [
        (criterion_1, 10),
        (criterion_2, 300),
        (criterion_3, 60),
        (criterion_4, 120),
        (criterion_5, 300),
        (criterion_6, 600),
        (criterion_7, 900),
        (criterion_8, 900),
        (criterion_9, 60),
        (criterion_10, 1800),
        (criterion_11, 60),
    ];
    let filter: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (k, (run, budget)) in criteria.iter().enumerate() {
        let id = k + 1;
        if filter.is_some_and(|f| f != id) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed < Duration::from_secs(*budget);
        failed += !pass as usize;
        println!(
            "criterion {id:>2}: {} {} [{:.1} s, budget {budget} s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
