//! Single-qubit POVMs, their dual frames, exact outcome distributions of
//! product measurements, and measurement sampling.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qsim::QuantumState;
use crate::C64;

/// Default cap on the number of entries of an exact outcome table.
pub const DEFAULT_TABLE_CAP: usize = 1 << 24;

const COMPLETENESS_TOL: f64 = 1e-12;
const GRAM_CONDITION_LIMIT: f64 = 1e8;

pub type Op2 = Matrix2<C64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PovmKind {
    Computational,
    Tetrahedral,
    RotatedTetrahedral { seed: u64 },
}

impl fmt::Display for PovmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PovmKind::Computational => write!(f, "computational"),
            PovmKind::Tetrahedral => write!(f, "tetrahedral"),
            PovmKind::RotatedTetrahedral { seed } => write!(f, "rotated-tetrahedral(seed={seed})"),
        }
    }
}

/// Parse a POVM name; `rotated-tetrahedral` requires `seed`.
pub fn parse_povm_kind(name: &str, seed: Option<u64>) -> Result<PovmKind> {
    match name {
        "computational" => Ok(PovmKind::Computational),
        "tetrahedral" => Ok(PovmKind::Tetrahedral),
        "rotated-tetrahedral" => match seed {
            Some(seed) => Ok(PovmKind::RotatedTetrahedral { seed }),
            None => Err(Error::Spec("rotated-tetrahedral POVM requires a seed".into())),
        },
        other => Err(Error::Spec(format!(
            "unknown POVM kind {other:?} (expected computational, tetrahedral or rotated-tetrahedral)"
        ))),
    }
}

impl FromStr for PovmKind {
    type Err = Error;

    /// Accepts `computational`, `tetrahedral` and `rotated-tetrahedral:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("rotated-tetrahedral", seed)) => {
                let seed = seed
                    .parse()
                    .map_err(|_| Error::Spec(format!("invalid rotation seed {seed:?}")))?;
                Ok(PovmKind::RotatedTetrahedral { seed })
            }
            _ => parse_povm_kind(s, None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Povm {
    pub kind: PovmKind,
    pub ops: Vec<Op2>,
}

impl Povm {
    pub fn q(&self) -> usize {
        self.ops.len()
    }

    /// Largest entry of `sum_a M_a - I`.
    pub fn completeness_error(&self) -> f64 {
        let sum = self.ops.iter().fold(Op2::zeros(), |acc, m| acc + m);
        (sum - Op2::identity()).iter().fold(0.0, |acc, z| acc.max(z.norm()))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.ops.iter().map(|m| eig2_min(m)).fold(f64::INFINITY, f64::min)
    }

    pub fn is_diagonal(&self) -> bool {
        self.ops.iter().all(|m| m[(0, 1)].norm() == 0.0 && m[(1, 0)].norm() == 0.0)
    }
}

fn eig2_min(m: &Op2) -> f64 {
    let a = m[(0, 0)].re;
    let d = m[(1, 1)].re;
    let b = m[(0, 1)].norm();
    0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt()
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn tetrahedral_ops() -> Vec<Op2> {
    let s2 = std::f64::consts::SQRT_2;
    let off = |angle: f64| C64::from_polar(s2 / 6.0, angle);
    let tau = 2.0 * std::f64::consts::PI;
    let arm = |angle: f64| Op2::new(c(1.0 / 6.0), off(-angle), off(angle), c(1.0 / 3.0));
    vec![
        Op2::new(c(0.5), c(0.0), c(0.0), c(0.0)),
        arm(0.0),
        arm(tau / 3.0),
        arm(2.0 * tau / 3.0),
    ]
}

/// Haar-random 2x2 unitary from the QR decomposition of a seeded complex
/// Gaussian matrix, with the phases of `R`'s diagonal moved into `Q`.
pub fn haar_unitary(seed: u64) -> Op2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im)
    };
    let z = Op2::new(draw(), draw(), draw(), draw());
    let qr = z.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut u = q;
    for k in 0..2 {
        let d = r[(k, k)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { c(1.0) };
        for row in 0..2 {
            u[(row, k)] *= phase;
        }
    }
    u
}

pub fn build_povm(kind: PovmKind) -> Povm {
    let ops = match kind {
        PovmKind::Computational => vec![
            Op2::new(c(1.0), c(0.0), c(0.0), c(0.0)),
            Op2::new(c(0.0), c(0.0), c(0.0), c(1.0)),
        ],
        PovmKind::Tetrahedral => tetrahedral_ops(),
        PovmKind::RotatedTetrahedral { seed } => {
            let u = haar_unitary(seed);
            tetrahedral_ops().iter().map(|m| u * m * u.adjoint()).collect()
        }
    };
    Povm { kind, ops }
}

/// Real coordinates of a Hermitian 2x2 matrix in the basis (I, X, Y, Z)/sqrt 2.
fn pauli_coords(m: &Op2) -> [f64; 4] {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    [
        r * (m[(0, 0)].re + m[(1, 1)].re),
        r * 2.0 * m[(0, 1)].re,
        r * -2.0 * m[(0, 1)].im,
        r * (m[(0, 0)].re - m[(1, 1)].re),
    ]
}

fn hs_inner(a: &Op2, b: &Op2) -> f64 {
    (a * b).trace().re
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualSet {
    /// `C_ab = Tr(M_a M_b)`.
    pub gram: DMatrix<f64>,
    pub gram_inverse: DMatrix<f64>,
    pub duals: Vec<Op2>,
    pub informationally_complete: bool,
    ops: Vec<Op2>,
}

impl DualSet {
    pub fn q(&self) -> usize {
        self.duals.len()
    }

    /// Least-squares projection of a Hermitian `o` onto the real span of the
    /// POVM operators. Returns the residual Hilbert-Schmidt norm.
    pub fn span_residual(&self, o: &Op2) -> f64 {
        let q = self.q();
        let b: Vec<f64> = self.ops.iter().map(|m| hs_inner(m, o)).collect();
        let mut proj = Op2::zeros();
        for a in 0..q {
            let coef: f64 = (0..q).map(|k| self.gram_inverse[(a, k)] * b[k]).sum();
            proj += self.ops[a] * c(coef);
        }
        let diff = o - proj;
        hs_inner(&diff.adjoint(), &diff).max(0.0).sqrt()
    }

    pub fn ops(&self) -> &[Op2] {
        &self.ops
    }
}

/// `D_a = sum_b [C^-1]_ab M_b` with `C_ab = Tr(M_a M_b)`.
pub fn dual_operators(povm: &Povm) -> Result<DualSet> {
    let q = povm.q();
    let gram = DMatrix::from_fn(q, q, |a, b| hs_inner(&povm.ops[a], &povm.ops[b]));
    let eig = gram.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond < GRAM_CONDITION_LIMIT) {
        return Err(Error::LinearDependence(cond));
    }
    let gram_inverse = gram
        .clone()
        .try_inverse()
        .ok_or(Error::LinearDependence(f64::INFINITY))?;
    let duals = (0..q)
        .map(|a| {
            (0..q).fold(Op2::zeros(), |acc, b| acc + povm.ops[b] * c(gram_inverse[(a, b)]))
        })
        .collect();

    let coords = DMatrix::from_fn(4, q, |k, a| pauli_coords(&povm.ops[a])[k]);
    let sv = coords.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > 1e-10 * top.max(1.0)).count();

    Ok(DualSet {
        gram,
        gram_inverse,
        duals,
        informationally_complete: rank == 4,
        ops: povm.ops.clone(),
    })
}

/// Exact outcome distribution of a product POVM on `n` sites.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    pub n: usize,
    pub q: usize,
    /// Indexed by the mixed-radix little-endian outcome string.
    pub probs: Vec<f64>,
}

impl ProbTable {
    pub fn new(n: usize, q: usize, probs: Vec<f64>) -> Result<Self> {
        let size = table_size(n, q)?;
        if probs.len() != size {
            return Err(Error::Spec(format!("table has {} entries, expected {size}", probs.len())));
        }
        let mut t = ProbTable { n, q, probs };
        t.clean()?;
        Ok(t)
    }

    pub fn uniform(n: usize, q: usize) -> Result<Self> {
        let size = table_size(n, q)?;
        Ok(ProbTable { n, q, probs: vec![1.0 / size as f64; size] })
    }

    /// Clamp rounding-level negatives to zero and renormalize.
    fn clean(&mut self) -> Result<()> {
        for p in self.probs.iter_mut() {
            if !p.is_finite() || *p < -COMPLETENESS_TOL {
                return Err(Error::InvalidState(format!("outcome probability {p:.3e} is negative")));
            }
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidState(format!("outcome probabilities sum to {total}")));
        }
        self.probs.iter_mut().for_each(|p| *p /= total);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn index_of(&self, config: &[u8]) -> usize {
        config_index(config, self.q)
    }

    pub fn config_of(&self, index: usize) -> Vec<u8> {
        index_config(index, self.n, self.q)
    }
}

pub(crate) fn table_size(n: usize, q: usize) -> Result<usize> {
    (q as u128)
        .checked_pow(n as u32)
        .filter(|&s| s <= usize::MAX as u128)
        .map(|s| s as usize)
        .ok_or(Error::TableCap { entries: u128::MAX, cap: DEFAULT_TABLE_CAP })
}

/// Mixed-radix little-endian index of a 0-based symbol string.
pub fn config_index(config: &[u8], q: usize) -> usize {
    config.iter().rev().fold(0usize, |acc, &s| acc * q + s as usize)
}

pub fn index_config(mut index: usize, n: usize, q: usize) -> Vec<u8> {
    (0..n)
        .map(|_| {
            let s = (index % q) as u8;
            index /= q;
            s
        })
        .collect()
}

/// Replace the radix-`from` digit at `site` by a radix-`to` digit through `weights[to][from]`.
fn contract_site<T>(old: &[T], dims: &[usize], site: usize, to: usize, weights: &[Vec<T>]) -> Vec<T>
where
    T: Copy + Send + Sync + Default + std::ops::Add<Output = T> + std::ops::Mul<Output = T>,
{
    let lo: usize = dims[..site].iter().product();
    let from = dims[site];
    let hi: usize = dims[site + 1..].iter().product();
    let mut out = vec![T::default(); lo * to * hi];
    out.par_chunks_mut(lo * to).enumerate().for_each(|(h, block)| {
        let src = &old[h * lo * from..(h + 1) * lo * from];
        for a in 0..to {
            let dst = &mut block[a * lo..(a + 1) * lo];
            for p in 0..from {
                let w = weights[a][p];
                let col = &src[p * lo..(p + 1) * lo];
                for (d, &s) in dst.iter_mut().zip(col) {
                    *d = *d + w * s;
                }
            }
        }
    });
    debug_assert_eq!(hi * lo * to, out.len());
    out
}

/// `probs[sigma] = Tr(rho (x)_i M_{sigma_i})`, contracting one site at a time.
pub fn outcome_distribution(state: &QuantumState, povm: &Povm, cap: usize) -> Result<ProbTable> {
    let n = state.n();
    let q = povm.q();
    let entries = (q as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if entries > cap as u128 {
        return Err(Error::TableCap { entries, cap });
    }
    let raw: Vec<f64> = if povm.is_diagonal() {
        let weights: Vec<Vec<f64>> =
            povm.ops.iter().map(|m| vec![m[(0, 0)].re, m[(1, 1)].re]).collect();
        let mut cur = state.diagonal();
        let mut dims = vec![2usize; n];
        for site in 0..n {
            cur = contract_site(&cur, &dims, site, q, &weights);
            dims[site] = q;
        }
        cur
    } else {
        let work = 4u128.pow(n as u32);
        if work > cap as u128 {
            return Err(Error::TableCap { entries: work, cap });
        }
        let rho = state.to_density()?;
        let dim = 1usize << n;
        // site digit p = row_bit + 2 * col_bit
        let spread = |x: usize| -> usize {
            (0..n).map(|k| ((x >> k) & 1) << (2 * k)).sum()
        };
        let spreads: Vec<usize> = (0..dim).map(spread).collect();
        let mut cur = vec![C64::new(0.0, 0.0); dim * dim];
        for r in 0..dim {
            for cidx in 0..dim {
                cur[spreads[r] | (spreads[cidx] << 1)] = rho.data()[(r, cidx)];
            }
        }
        // Tr(rho M) = sum_{r,c} rho_rc M_cr
        let weights: Vec<Vec<C64>> = povm
            .ops
            .iter()
            .map(|m| (0..4).map(|p| m[(p >> 1, p & 1)]).collect())
            .collect();
        let mut dims = vec![4usize; n];
        for site in 0..n {
            cur = contract_site(&cur, &dims, site, q, &weights);
            dims[site] = q;
        }
        let worst_im = cur.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
        if worst_im > 1e-10 {
            return Err(Error::InvalidState(format!(
                "outcome probabilities have imaginary residue {worst_im:.3e}"
            )));
        }
        cur.into_iter().map(|z| z.re).collect()
    };
    ProbTable::new(n, q, raw)
}

/// Measurement record: `m` rows of `n` symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    pub n: usize,
    pub q: usize,
    /// Row-major, 0-based symbols.
    pub data: Vec<u8>,
    pub provenance: String,
}

impl SampleSet {
    pub fn new(n: usize, q: usize, data: Vec<u8>, provenance: impl Into<String>) -> Result<Self> {
        if n == 0 || q < 2 || q > 255 {
            return Err(Error::Spec(format!("invalid sample dimensions n={n}, q={q}")));
        }
        if data.len() % n != 0 {
            return Err(Error::Spec("sample data is not a whole number of rows".into()));
        }
        if let Some(bad) = data.iter().find(|&&s| s as usize >= q) {
            return Err(Error::Spec(format!("symbol {} out of range 1..={q}", *bad as usize + 1)));
        }
        Ok(SampleSet { n, q, data, provenance: provenance.into() })
    }

    pub fn m(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, u8> {
        self.data.chunks_exact(self.n)
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.n..(t + 1) * self.n]
    }

    /// Empirical distribution as a dense histogram over all `q^n` outcomes.
    pub fn histogram(&self, cap: usize) -> Result<Vec<f64>> {
        let entries = (self.q as u128).checked_pow(self.n as u32).unwrap_or(u128::MAX);
        if entries > cap as u128 {
            return Err(Error::TableCap { entries, cap });
        }
        let mut h = vec![0.0; entries as usize];
        for row in self.rows() {
            h[config_index(row, self.q)] += 1.0;
        }
        let m = self.m() as f64;
        h.iter_mut().for_each(|x| *x /= m);
        Ok(h)
    }

    /// Text format: a header line, then one row of 1-based symbols per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        use std::fmt::Write as _;
        let prov = self.provenance.replace(['\n', '\r'], " ");
        writeln!(w, "#qebm-samples v1 q={} n={} m={} provenance={}", self.q, self.n, self.m(), prov)?;
        let mut line = String::with_capacity(self.n * 3);
        for row in self.rows() {
            line.clear();
            for (k, &s) in row.iter().enumerate() {
                if k > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{}", s as usize + 1);
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Corrupt("empty sample file".into()))??;
        let header = SampleHeader::parse(&header)?;
        let mut data = Vec::with_capacity(header.m * header.n);
        let mut rows = 0usize;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split_ascii_whitespace() {
                let v: usize = tok.parse().map_err(|_| {
                    Error::Corrupt(format!("line {}: invalid symbol {tok:?}", lineno + 2))
                })?;
                if v == 0 || v > header.q {
                    return Err(Error::Corrupt(format!(
                        "line {}: symbol {v} outside 1..={}",
                        lineno + 2,
                        header.q
                    )));
                }
                data.push((v - 1) as u8);
            }
            if data.len() - before != header.n {
                return Err(Error::Corrupt(format!(
                    "line {}: expected {} symbols, found {}",
                    lineno + 2,
                    header.n,
                    data.len() - before
                )));
            }
            rows += 1;
        }
        if rows != header.m {
            return Err(Error::Corrupt(format!("header declares m={} rows, found {rows}", header.m)));
        }
        SampleSet::new(header.n, header.q, data, header.provenance)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        SampleSet::read_from(std::io::BufReader::new(f))
    }
}

/// Parsed `#qebm-samples` header line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleHeader {
    pub q: usize,
    pub n: usize,
    pub m: usize,
    pub provenance: String,
}

impl SampleHeader {
    pub fn parse(line: &str) -> Result<Self> {
        let rest = line
            .strip_prefix("#qebm-samples v1 ")
            .ok_or_else(|| Error::Corrupt(format!("not a v1 sample header: {line:?}")))?;
        let (fields, provenance) = match rest.find("provenance=") {
            Some(pos) => (&rest[..pos], rest[pos + "provenance=".len()..].to_string()),
            None => (rest, String::new()),
        };
        let mut q = None;
        let mut n = None;
        let mut m = None;
        for tok in fields.split_ascii_whitespace() {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("malformed header field {tok:?}")))?;
            let val: usize = val
                .parse()
                .map_err(|_| Error::Corrupt(format!("header field {key} has invalid value {val:?}")))?;
            match key {
                "q" => q = Some(val),
                "n" => n = Some(val),
                "m" => m = Some(val),
                _ => return Err(Error::Corrupt(format!("unknown header field {key:?}"))),
            }
        }
        let missing = |k: &str| Error::Corrupt(format!("header is missing field {k}"));
        Ok(SampleHeader {
            q: q.ok_or_else(|| missing("q"))?,
            n: n.ok_or_else(|| missing("n"))?,
            m: m.ok_or_else(|| missing("m"))?,
            provenance,
        })
    }
}

/// Inverse-CDF sampler over a probability table.
pub(crate) struct TableSampler {
    cumulative: Vec<f64>,
}

impl TableSampler {
    pub(crate) fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // guard against the total landing just below 1
        if let Some(last_pos) = probs.iter().rposition(|&p| p > 0.0) {
            for c in &mut cumulative[last_pos..] {
                *c = f64::INFINITY;
            }
        }
        TableSampler { cumulative }
    }

    #[inline]
    pub(crate) fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative.partition_point(|&c| c <= u)
    }
}

/// `m` i.i.d. draws from the table, deterministic in `seed`.
pub fn sample_outcomes(table: &ProbTable, m: usize, seed: u64) -> Result<SampleSet> {
    if m == 0 {
        return Err(Error::InvalidParameter("sample count m must be at least 1".into()));
    }
    let sampler = TableSampler::new(&table.probs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(m * table.n);
    for _ in 0..m {
        let idx = sampler.draw(&mut rng);
        data.extend(index_config(idx, table.n, table.q));
    }
    SampleSet::new(table.n, table.q, data, format!("table n={} q={} seed={seed}", table.n, table.q))
}

/// Measure `state` with `povm` `m` times (through the exact outcome table).
pub fn sample_state(state: &QuantumState, povm: &Povm, m: usize, seed: u64, cap: usize) -> Result<SampleSet> {
    let table = outcome_distribution(state, povm, cap)?;
    let mut s = sample_outcomes(&table, m, seed)?;
    s.provenance = format!("povm={} n={} seed={seed}", povm.kind, state.n());
    Ok(s)
}
