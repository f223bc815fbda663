//! Energy-based models over `[q]^n`: per-spin local energies, single-spin
//! conditionals and Gibbs sampling.
//!
//! The partition function is never needed: conditionals and Gibbs sweeps
//! only use energy differences at one spin.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::families::{centered_delta, spin_value, Family, LocalEnergyFn, PolyParams, SpinEnergy};
use crate::povm::{ProbTable, SampleSet};

pub const MODEL_FORMAT: &str = "qebm-model";
pub const MODEL_VERSION: u64 = 1;

/// Parameter sharing across spins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symmetry {
    /// One parameter block per spin.
    None,
    /// A single block fitted for spin 0 and reused on the ring, with
    /// neighbour indices shifted by `u`.
    Translation,
    /// A single symmetric-table block shared by all spins.
    Permutation,
}

impl std::str::FromStr for Symmetry {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Symmetry::None),
            "translation" => Ok(Symmetry::Translation),
            "permutation" => Ok(Symmetry::Permutation),
            other => Err(Error::Spec(format!("unknown symmetry {other:?}"))),
        }
    }
}

impl std::fmt::Display for Symmetry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Symmetry::None => "none",
            Symmetry::Translation => "translation",
            Symmetry::Permutation => "permutation",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    n: usize,
    q: usize,
    symmetry: Symmetry,
    /// `n` blocks for [`Symmetry::None`], one shared block otherwise.
    blocks: Vec<SpinEnergy>,
}

impl EnergyModel {
    pub fn new(n: usize, q: usize, symmetry: Symmetry, blocks: Vec<SpinEnergy>) -> Result<Self> {
        let expected = if symmetry == Symmetry::None { n } else { 1 };
        if blocks.len() != expected {
            return Err(Error::Spec(format!(
                "symmetry {symmetry} needs {expected} parameter block(s), got {}",
                blocks.len()
            )));
        }
        for (u, b) in blocks.iter().enumerate() {
            if b.n() != n || b.q() != q {
                return Err(Error::Spec(format!(
                    "block {u} has n={}, q={}, model has n={n}, q={q}",
                    b.n(),
                    b.q()
                )));
            }
            if b.spin() != u {
                return Err(Error::Spec(format!("block {u} is parametrized for spin {}", b.spin())));
            }
        }
        if symmetry == Symmetry::Permutation && !matches!(blocks[0].family, Family::Symmetric(_)) {
            return Err(Error::Spec("permutation symmetry requires the symmetric family".into()));
        }
        Ok(EnergyModel { n, q, symmetry, blocks })
    }

    /// Model whose local energies all vanish (uniform distribution).
    pub fn zeros(n: usize, q: usize) -> Result<Self> {
        let blocks = (0..n)
            .map(|u| PolyParams::new(u, n, q, 1, None).map(|p| SpinEnergy::new(Family::Poly(p))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(n, q, Symmetry::None, blocks)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn q(&self) -> usize {
        self.q
    }
    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }
    pub fn blocks(&self) -> &[SpinEnergy] {
        &self.blocks
    }
    pub fn blocks_mut(&mut self) -> &mut [SpinEnergy] {
        &mut self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.num_params()).sum()
    }

    /// Writes `f_u(config)` into `out`; `rot` is scratch space.
    fn local_field_into(&self, u: usize, config: &[u8], rot: &mut Vec<u8>, out: &mut [f64]) {
        match self.symmetry {
            Symmetry::None => self.blocks[u].value_into(config, out),
            _ => {
                rot.clear();
                rot.extend((0..self.n).map(|k| config[(k + u) % self.n]));
                self.blocks[0].value_into(rot, out);
            }
        }
    }

    /// Local energy vector `f_u(config)`; the entry at `u` is ignored.
    pub fn local_field(&self, u: usize, config: &[u8]) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        self.local_field_into(u, config, &mut Vec::new(), &mut out);
        out
    }

    /// `<phi(sigma_u), f_u(sigma_\u)>`.
    pub fn local_energy(&self, u: usize, config: &[u8]) -> f64 {
        let f = self.local_field(u, config);
        let s = config[u] as usize;
        f.iter().enumerate().map(|(a, v)| centered_delta(a, s, self.q) * v).sum()
    }

    fn check_config(&self, u: usize, config: &[u8]) -> Result<()> {
        if u >= self.n {
            return Err(Error::Spec(format!("spin {u} out of range for n={}", self.n)));
        }
        if config.len() != self.n || config.iter().any(|&s| s as usize >= self.q) {
            return Err(Error::Spec(format!("invalid configuration {config:?}")));
        }
        Ok(())
    }

    /// `P(sigma_u = a | sigma_\u)` for every `a`.
    pub fn conditional(&self, u: usize, config: &[u8]) -> Result<Vec<f64>> {
        self.check_config(u, config)?;
        let mut out = vec![0.0; self.q];
        self.conditional_into(u, config, &mut Vec::new(), &mut out);
        Ok(out)
    }

    /// Softmax of `f_a - mean(f)`, stabilized by max subtraction.
    fn conditional_into(&self, u: usize, config: &[u8], rot: &mut Vec<u8>, out: &mut [f64]) {
        self.local_field_into(u, config, rot, out);
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        out.iter_mut().for_each(|v| *v /= total);
    }

    pub fn to_json(&self) -> Value {
        json!({
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "n": self.n,
            "q": self.q,
            "symmetry": self.symmetry,
            "spins": self.blocks.iter().map(SpinEnergy::to_json).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        if v.get("format").and_then(Value::as_str) != Some(MODEL_FORMAT) {
            return Err(Error::Schema("not a qebm model document".into()));
        }
        match v.get("version").and_then(Value::as_u64) {
            Some(MODEL_VERSION) => {}
            other => return Err(Error::Schema(format!("unsupported model version {other:?}"))),
        }
        let get = |k: &str| {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| Error::Corrupt(format!("missing or invalid {k:?}")))
        };
        let symmetry: Symmetry = serde_json::from_value(v.get("symmetry").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Schema(format!("invalid symmetry: {e}")))?;
        let blocks = v
            .get("spins")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Corrupt("missing spins array".into()))?
            .iter()
            .map(SpinEnergy::from_json)
            .collect::<Result<Vec<_>>>()?;
        Self::new(get("n")?, get("q")?, symmetry, blocks).map_err(|e| match e {
            Error::Spec(msg) => Error::Corrupt(msg),
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("model JSON is always serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::Corrupt(format!("model file: {e}")))?;
        Self::from_json(&v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Binary energy `E(s) = sum_T c_T prod_{i in T} s_i` with `s_i = +-1`
/// (symbol 0 is `+1`).
#[derive(Clone, Debug, PartialEq)]
pub struct IsingEnergy {
    pub n: usize,
    pub terms: Vec<(Vec<usize>, f64)>,
}

impl IsingEnergy {
    pub fn new(n: usize, terms: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        for (t, _) in &terms {
            let mut sorted = t.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if t.is_empty() || sorted.len() != t.len() || t.iter().any(|&i| i >= n) {
                return Err(Error::Spec(format!("invalid interaction {t:?} for n={n}")));
            }
        }
        Ok(IsingEnergy { n, terms })
    }

    pub fn energy(&self, config: &[u8]) -> f64 {
        self.terms
            .iter()
            .map(|(t, c)| c * t.iter().map(|&i| spin_value(config[i])).product::<f64>())
            .sum()
    }

    /// Exact `mu ~ exp(E)` by enumeration.
    pub fn distribution(&self) -> Result<ProbTable> {
        let size = 1usize
            .checked_shl(self.n as u32)
            .filter(|&s| s <= crate::povm::DEFAULT_TABLE_CAP)
            .ok_or(Error::TableCap { entries: 1u128 << self.n.min(127), cap: crate::povm::DEFAULT_TABLE_CAP })?;
        let energies: Vec<f64> = (0..size)
            .map(|i| {
                let config: Vec<u8> = (0..self.n).map(|k| ((i >> k) & 1) as u8).collect();
                self.energy(&config)
            })
            .collect();
        let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        ProbTable::new(self.n, 2, weights.iter().map(|w| w / z).collect())
    }

    /// Equivalent EBM with one polynomial block per spin.
    pub fn to_model(&self) -> Result<EnergyModel> {
        let max_order = self.terms.iter().map(|(t, _)| t.len()).max().unwrap_or(1).max(1);
        let mut blocks = Vec::with_capacity(self.n);
        for u in 0..self.n {
            let mut p = PolyParams::new(u, self.n, 2, max_order, None)?;
            for (t, c) in self.terms.iter().filter(|(t, _)| t.contains(&u)) {
                let mut rest: Vec<usize> = t.iter().cloned().filter(|&i| i != u).collect();
                rest.sort_unstable();
                let old = p.ising_coefficient(&rest).unwrap_or(0.0);
                p.set_ising_coefficient(&rest, old + c)?;
            }
            blocks.push(SpinEnergy::new(Family::Poly(p)));
        }
        EnergyModel::new(self.n, 2, Symmetry::None, blocks)
    }
}

/// Gibbs sampling schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub chains: usize,
    /// Sweeps before the first emitted row; `None` means `10 n`.
    pub burn_in: Option<usize>,
    /// Sweeps between emitted rows; `None` means `max(1, n / 2)`.
    pub thin: Option<usize>,
    pub total: usize,
    pub seed: u64,
}

impl GibbsConfig {
    pub fn new(total: usize, seed: u64) -> Self {
        GibbsConfig { chains: 4, burn_in: None, thin: None, total, seed }
    }

    pub fn burn_in_for(&self, n: usize) -> usize {
        self.burn_in.unwrap_or(10 * n)
    }

    pub fn thin_for(&self, n: usize) -> usize {
        self.thin.unwrap_or((n / 2).max(1))
    }
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a as u8;
        }
    }
    // rounding left a sliver above the last cumulative value
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8
}

/// Systematic-scan Gibbs sampling with independent chains emitting rows
/// round-robin (chain `c` produces rows `c, c + chains, ...`).
pub fn gibbs_sample(model: &EnergyModel, cfg: &GibbsConfig) -> Result<SampleSet> {
    if cfg.total == 0 {
        return Err(Error::InvalidParameter("Gibbs sampling needs total > 0".into()));
    }
    if cfg.chains == 0 {
        return Err(Error::InvalidParameter("Gibbs sampling needs at least one chain".into()));
    }
    if cfg.thin == Some(0) {
        return Err(Error::InvalidParameter("thin must be at least 1".into()));
    }
    let (n, q) = (model.n, model.q);
    let burn_in = cfg.burn_in_for(n);
    let thin = cfg.thin_for(n);
    let chains = cfg.chains.min(cfg.total);
    let per_chain: Vec<Vec<u8>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let rows = (cfg.total - c).div_ceil(chains);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let mut state: Vec<u8> = (0..n).map(|_| rng.random_range(0..q) as u8).collect();
            let mut rot = Vec::with_capacity(n);
            let mut probs = vec![0.0; q];
            let mut sweep = |state: &mut Vec<u8>, rng: &mut ChaCha8Rng| {
                for u in 0..n {
                    model.conditional_into(u, state, &mut rot, &mut probs);
                    state[u] = draw(&probs, rng);
                }
            };
            for _ in 0..burn_in {
                sweep(&mut state, &mut rng);
            }
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                for _ in 0..thin {
                    sweep(&mut state, &mut rng);
                }
                out.extend_from_slice(&state);
            }
            out
        })
        .collect();
    let mut data = Vec::with_capacity(cfg.total * n);
    for r in 0..cfg.total {
        let (c, k) = (r % chains, r / chains);
        data.extend_from_slice(&per_chain[c][k * n..(k + 1) * n]);
    }
    SampleSet::new(
        n,
        q,
        data,
        format!("gibbs chains={chains} burn_in={burn_in} thin={thin} seed={}", cfg.seed),
    )
}
