//! Estimators on measurement outcomes: observables and fidelities through
//! dual operators, reduced density matrices, trace distance, TVD against an
//! exact table, and order-by-order coefficient strengths of polynomial models.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::ebm::EnergyModel;
use crate::error::{Error, Result};
use crate::families::Family;
use crate::povm::{sample_outcomes, DualSet, Op2, ProbTable, SampleSet, DEFAULT_TABLE_CAP};
use crate::qsim::{hermitian_deviation, hermitian_eigh, PureState};
use crate::C64;

/// Tolerance on the least-squares residual of an observable factor against
/// the POVM span.
pub const SPAN_TOL: f64 = 1e-9;

/// Default cap on the number of basis states in a fidelity target.
pub const DEFAULT_FIDELITY_TERMS: usize = 16;

/// A product observable on `n` qubits.
#[derive(Clone, Debug, PartialEq)]
pub enum ObservableSpec {
    /// Letters `I, X, Y, Z`; letter `k` acts on qubit `k`.
    Pauli(String),
    /// One Hermitian 2x2 factor per qubit.
    Product(Vec<Op2>),
}

pub fn pauli_matrix(letter: char) -> Result<Op2> {
    let r = |x: f64| C64::new(x, 0.0);
    Ok(match letter.to_ascii_uppercase() {
        'I' => Matrix2::identity(),
        'X' => Matrix2::new(r(0.0), r(1.0), r(1.0), r(0.0)),
        'Y' => Matrix2::new(r(0.0), C64::new(0.0, -1.0), C64::new(0.0, 1.0), r(0.0)),
        'Z' => Matrix2::new(r(1.0), r(0.0), r(0.0), r(-1.0)),
        other => return Err(Error::Spec(format!("invalid Pauli letter {other:?}"))),
    })
}

impl ObservableSpec {
    /// Per-site factors, `None` for identity sites.
    pub fn factors(&self, n: usize) -> Result<Vec<Option<Op2>>> {
        match self {
            ObservableSpec::Pauli(s) => {
                let letters: Vec<char> = s.chars().collect();
                if letters.len() != n {
                    return Err(Error::Spec(format!("observable {s:?} has length {}, expected {n}", letters.len())));
                }
                letters
                    .into_iter()
                    .map(|c| {
                        if c.eq_ignore_ascii_case(&'I') {
                            Ok(None)
                        } else {
                            pauli_matrix(c).map(Some)
                        }
                    })
                    .collect()
            }
            ObservableSpec::Product(ops) => {
                if ops.len() != n {
                    return Err(Error::Spec(format!("observable has {} factors, expected {n}", ops.len())));
                }
                ops.iter()
                    .map(|o| {
                        let dev = (o - o.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
                        if dev > 1e-10 {
                            return Err(Error::NotHermitian(dev));
                        }
                        Ok((o != &Op2::identity()).then_some(*o))
                    })
                    .collect()
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            ObservableSpec::Pauli(s) => s.clone(),
            ObservableSpec::Product(ops) => format!("product[{}]", ops.len()),
        }
    }
}

/// Mean of per-sample values with its i.i.d. standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub mean: f64,
    pub stderr: f64,
    #[serde(rename = "N")]
    pub count: usize,
}

impl EstimateResult {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let count = values.len();
        if count == 0 {
            return Err(Error::InvalidParameter("no samples to estimate from".into()));
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let stderr = if count > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            (var / count as f64).sqrt()
        } else {
            0.0
        };
        Ok(EstimateResult { mean, stderr, count })
    }
}

fn check_samples(samples: &SampleSet, duals: &DualSet) -> Result<()> {
    if samples.q != duals.q() {
        return Err(Error::Spec(format!(
            "samples have q={}, POVM has {} outcomes",
            samples.q,
            duals.q()
        )));
    }
    if samples.m() == 0 {
        return Err(Error::InvalidParameter("empty sample set".into()));
    }
    Ok(())
}

fn require_ic(duals: &DualSet) -> Result<()> {
    if !duals.informationally_complete {
        return Err(Error::NotInformationallyComplete(format!(
            "a {}-outcome POVM that does not span the qubit operator space",
            duals.q()
        )));
    }
    Ok(())
}

/// Per-sample values `prod_i Tr(D_{tau_i} O_i)`.
pub fn observable_values(samples: &SampleSet, duals: &DualSet, obs: &ObservableSpec) -> Result<Vec<f64>> {
    check_samples(samples, duals)?;
    let factors = obs.factors(samples.n)?;
    let mut tables: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, f) in factors.iter().enumerate() {
        let Some(o) = f else { continue };
        let residual = duals.span_residual(o);
        if residual > SPAN_TOL {
            return Err(Error::Span(format!(
                "factor on site {i} of {} lies outside the POVM span (residual {residual:.3e})",
                obs.label()
            )));
        }
        tables.push((i, duals.duals.iter().map(|d| (d * o).trace().re).collect()));
    }
    Ok(samples
        .rows()
        .map(|row| tables.iter().map(|(i, t)| t[row[*i] as usize]).product())
        .collect())
}

pub fn estimate_observable(samples: &SampleSet, duals: &DualSet, obs: &ObservableSpec) -> Result<EstimateResult> {
    EstimateResult::from_values(&observable_values(samples, duals, obs)?)
}

/// `<psi| rho |psi>` estimated from the per-sample reconstructions
/// `rho_t = D_{tau_1} (x) ... (x) D_{tau_n}`.
pub fn estimate_fidelity(samples: &SampleSet, duals: &DualSet, target: &PureState) -> Result<EstimateResult> {
    estimate_fidelity_capped(samples, duals, target, DEFAULT_FIDELITY_TERMS)
}

pub fn estimate_fidelity_capped(
    samples: &SampleSet,
    duals: &DualSet,
    target: &PureState,
    max_terms: usize,
) -> Result<EstimateResult> {
    check_samples(samples, duals)?;
    require_ic(duals)?;
    let n = samples.n;
    if target.n() != n {
        return Err(Error::Spec(format!("target has {} qubits, samples have {n}", target.n())));
    }
    let terms = target.sparse_terms(1e-14);
    if terms.len() > max_terms {
        return Err(Error::Size(format!(
            "fidelity target has {} basis terms, cap is {max_terms}",
            terms.len()
        )));
    }
    let pairs: Vec<(C64, u64, u64)> = terms
        .iter()
        .flat_map(|&(x, cx)| terms.iter().map(move |&(y, cy)| (cx.conj() * cy, x, y)))
        .collect();
    let mut values = Vec::with_capacity(samples.m());
    for row in samples.rows() {
        let mut v = C64::new(0.0, 0.0);
        for &(w, x, y) in &pairs {
            let mut prod = w;
            for (i, &t) in row.iter().enumerate() {
                let d = &duals.duals[t as usize];
                prod *= d[(((x >> i) & 1) as usize, ((y >> i) & 1) as usize)];
            }
            v += prod;
        }
        if v.im.abs() > 1e-9 * v.re.abs().max(1.0) {
            return Err(Error::InvalidState(format!("fidelity sample has imaginary part {:.3e}", v.im)));
        }
        values.push(v.re);
    }
    EstimateResult::from_values(&values)
}

/// Average of `D_{tau_i}` (one site) or of the two-site product, with
/// `sites[k]` as bit `k` of the matrix index. Hermitized, not projected
/// onto the positive cone.
pub fn estimate_reduced_state(samples: &SampleSet, duals: &DualSet, sites: &[usize]) -> Result<DMatrix<C64>> {
    check_samples(samples, duals)?;
    require_ic(duals)?;
    let n = samples.n;
    if sites.is_empty() || sites.len() > 2 || sites.iter().any(|&s| s >= n) || (sites.len() == 2 && sites[0] == sites[1]) {
        return Err(Error::Spec(format!("invalid site list {sites:?} for n={n}")));
    }
    let q = samples.q;
    let mut counts = vec![0usize; q.pow(sites.len() as u32)];
    for row in samples.rows() {
        let idx = sites.iter().rev().fold(0, |acc, &s| acc * q + row[s] as usize);
        counts[idx] += 1;
    }
    let dim = 1 << sites.len();
    let mut acc = DMatrix::<C64>::zeros(dim, dim);
    let m = samples.m() as f64;
    for (idx, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let w = C64::new(c as f64 / m, 0.0);
        let d0 = &duals.duals[idx % q];
        if sites.len() == 1 {
            for r in 0..2 {
                for col in 0..2 {
                    acc[(r, col)] += w * d0[(r, col)];
                }
            }
        } else {
            let d1 = &duals.duals[idx / q];
            for r in 0..4 {
                for col in 0..4 {
                    acc[(r, col)] += w * d0[(r & 1, col & 1)] * d1[(r >> 1, col >> 1)];
                }
            }
        }
    }
    Ok((&acc + acc.adjoint()) * C64::new(0.5, 0.0))
}

/// Half the sum of absolute eigenvalues of `a - b`.
pub fn trace_distance(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<f64> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(Error::Spec(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    for m in [a, b] {
        let dev = hermitian_deviation(m);
        if dev > 1e-8 {
            return Err(Error::NotHermitian(dev));
        }
    }
    let (eig, _) = hermitian_eigh(&(a - b));
    Ok(0.5 * eig.iter().map(|e| e.abs()).sum::<f64>())
}

/// Half the l1 distance between two distributions on the same support.
pub fn tvd(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// TVD between the empirical histogram of `model_samples` and `table`,
/// together with the TVD of an equally sized fresh draw from `table`.
pub fn tvd_with_floor(model_samples: &SampleSet, table: &ProbTable, floor_seed: u64) -> Result<(f64, f64)> {
    if model_samples.n != table.n || model_samples.q != table.q {
        return Err(Error::Spec(format!(
            "samples have n={}, q={}, table has n={}, q={}",
            model_samples.n, model_samples.q, table.n, table.q
        )));
    }
    let hist = model_samples.histogram(DEFAULT_TABLE_CAP)?;
    let fresh = sample_outcomes(table, model_samples.m(), floor_seed)?.histogram(DEFAULT_TABLE_CAP)?;
    Ok((tvd(&hist, &table.probs), tvd(&fresh, &table.probs)))
}

/// Largest absolute polynomial coefficient at each interaction order,
/// where a term with neighbour set `K` has order `|K| + 1`.
pub fn order_strength(model: &EnergyModel) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for block in model.blocks() {
        let Family::Poly(p) = &block.family else {
            return Err(Error::Spec(format!("order strengths need a polynomial model, found {}", block.family.tag())));
        };
        for k in 1..=p.max_order() {
            out.entry(k).or_insert(0.0);
        }
        for (t, term) in p.terms().iter().enumerate() {
            let top = p.block(t).iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
            let e: &mut f64 = out.entry(term.len() + 1).or_insert(0.0);
            *e = e.max(top);
        }
    }
    Ok(out)
}

/// Two-column `order strength` text.
pub fn format_order_strength(strengths: &BTreeMap<usize, f64>) -> String {
    strengths.iter().map(|(k, v)| format!("{k} {v:e}\n")).collect()
}
