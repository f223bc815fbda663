//! Exact construction of small quantum states and reference expectation values.
//!
//! Everything here is dense: Hamiltonians and density matrices are stored as
//! full `2^n x 2^n` complex matrices, pure states as `2^n` amplitude vectors.
//! Qubit `k` is bit `k` of a basis index (little-endian), and character `k` of
//! a Pauli string acts on qubit `k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

/// Largest qubit count for which dense operators are built.
pub const MAX_DENSE_QUBITS: usize = 14;
/// Largest qubit count for pure-state amplitude vectors.
pub const MAX_PURE_QUBITS: usize = 20;

const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HamiltonianKind {
    /// `sum_{(i,j)} J_ij Z_i Z_j + g sum_i X_i`
    Tim,
    /// `sum_{(i,j)} J_ij (X_i X_j + Y_i Y_j + Z_i Z_j)`
    Heisenberg,
    /// Arbitrary real combination of Pauli strings.
    #[serde(alias = "custom")]
    CustomPauliSum,
}

/// Serializable description of a qubit Hamiltonian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub n: usize,
    pub kind: HamiltonianKind,
    #[serde(default)]
    pub edges: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub g: f64,
    #[serde(default)]
    pub terms: Vec<(String, f64)>,
}

impl HamiltonianSpec {
    /// Transverse-field Ising chain with uniform coupling `j` on every bond.
    pub fn tim_chain(n: usize, j: f64, g: f64, periodic: bool) -> Self {
        HamiltonianSpec {
            n,
            kind: HamiltonianKind::Tim,
            edges: chain_edges(n, j, periodic),
            g,
            terms: Vec::new(),
        }
    }

    pub fn heisenberg(n: usize, edges: Vec<(usize, usize, f64)>) -> Self {
        HamiltonianSpec {
            n,
            kind: HamiltonianKind::Heisenberg,
            edges,
            g: 0.0,
            terms: Vec::new(),
        }
    }

    pub fn pauli_sum(n: usize, terms: Vec<(String, f64)>) -> Self {
        HamiltonianSpec {
            n,
            kind: HamiltonianKind::CustomPauliSum,
            edges: Vec::new(),
            g: 0.0,
            terms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Spec("qubit count must be at least 1".into()));
        }
        if self.n > MAX_DENSE_QUBITS {
            return Err(Error::Size(format!(
                "{} qubits exceeds the dense cap of {MAX_DENSE_QUBITS}",
                self.n
            )));
        }
        for &(i, j, c) in &self.edges {
            if !(i < j && j < self.n) {
                return Err(Error::Spec(format!(
                    "edge ({i}, {j}) must satisfy 0 <= i < j < n = {}",
                    self.n
                )));
            }
            if !c.is_finite() {
                return Err(Error::Spec(format!("coupling on edge ({i}, {j}) is not finite")));
            }
        }
        if !self.g.is_finite() {
            return Err(Error::Spec("transverse field is not finite".into()));
        }
        for (s, c) in &self.terms {
            PauliString::parse(s, self.n)?;
            if !c.is_finite() {
                return Err(Error::Spec(format!("coefficient of {s} is not finite")));
            }
        }
        Ok(())
    }

    /// Expand into an explicit list of `(pauli string, coefficient)` terms.
    pub fn pauli_terms(&self) -> Vec<(String, f64)> {
        let n = self.n;
        let two_site = |i: usize, j: usize, p: char| {
            let mut s = vec!['I'; n];
            s[i] = p;
            s[j] = p;
            s.into_iter().collect::<String>()
        };
        match self.kind {
            HamiltonianKind::Tim => {
                let mut out: Vec<(String, f64)> =
                    self.edges.iter().map(|&(i, j, c)| (two_site(i, j, 'Z'), c)).collect();
                if self.g != 0.0 {
                    for k in 0..n {
                        let mut s = vec!['I'; n];
                        s[k] = 'X';
                        out.push((s.into_iter().collect(), self.g));
                    }
                }
                out
            }
            HamiltonianKind::Heisenberg => self
                .edges
                .iter()
                .flat_map(|&(i, j, c)| {
                    ['X', 'Y', 'Z'].into_iter().map(move |p| (i, j, c, p))
                })
                .map(|(i, j, c, p)| (two_site(i, j, p), c))
                .collect(),
            HamiltonianKind::CustomPauliSum => self.terms.clone(),
        }
    }
}

/// Nearest-neighbour bonds of an open (or periodic) chain.
pub fn chain_edges(n: usize, j: f64, periodic: bool) -> Vec<(usize, usize, f64)> {
    let mut edges: Vec<(usize, usize, f64)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1, j)).collect();
    if periodic && n > 2 {
        edges.push((0, n - 1, j));
    }
    edges
}

/// A Pauli string in bit-mask form: `P|x> = phase(x) |x ^ flip>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PauliString {
    pub n: usize,
    /// Sites carrying X or Y.
    pub flip: u64,
    /// Sites carrying Z or Y.
    pub sign: u64,
    /// Number of Y letters.
    pub n_y: u32,
}

impl PauliString {
    pub fn parse(s: &str, n: usize) -> Result<Self> {
        let letters: Vec<char> = s.chars().collect();
        if letters.len() != n {
            return Err(Error::Spec(format!(
                "Pauli string {s:?} has length {}, expected {n}",
                letters.len()
            )));
        }
        if n > 63 {
            return Err(Error::Size(format!("Pauli strings limited to 63 sites, got {n}")));
        }
        let mut p = PauliString { n, flip: 0, sign: 0, n_y: 0 };
        for (k, c) in letters.into_iter().enumerate() {
            let bit = 1u64 << k;
            match c.to_ascii_uppercase() {
                'I' => {}
                'X' => p.flip |= bit,
                'Z' => p.sign |= bit,
                'Y' => {
                    p.flip |= bit;
                    p.sign |= bit;
                    p.n_y += 1;
                }
                other => {
                    return Err(Error::Spec(format!("invalid Pauli letter {other:?} in {s:?}")))
                }
            }
        }
        Ok(p)
    }

    /// Phase picked up by basis state `x`: `i^{n_y} (-1)^{|x & sign|}`.
    #[inline]
    pub fn phase(&self, x: u64) -> C64 {
        let base = match self.n_y % 4 {
            0 => C64::new(1.0, 0.0),
            1 => C64::new(0.0, 1.0),
            2 => C64::new(-1.0, 0.0),
            _ => C64::new(0.0, -1.0),
        };
        if (x & self.sign).count_ones() % 2 == 1 {
            -base
        } else {
            base
        }
    }

    pub fn matrix(&self) -> DMatrix<C64> {
        let dim = 1usize << self.n;
        let mut m = DMatrix::zeros(dim, dim);
        for x in 0..dim as u64 {
            m[((x ^ self.flip) as usize, x as usize)] = self.phase(x);
        }
        m
    }
}

/// Dense matrix of the Pauli sum described by `spec`.
pub fn build_hamiltonian(spec: &HamiltonianSpec) -> Result<DMatrix<C64>> {
    spec.validate()?;
    let dim = 1usize << spec.n;
    let mut h = DMatrix::<C64>::zeros(dim, dim);
    for (s, c) in spec.pauli_terms() {
        let p = PauliString::parse(&s, spec.n)?;
        for x in 0..dim as u64 {
            h[((x ^ p.flip) as usize, x as usize)] += p.phase(x) * c;
        }
    }
    Ok(h)
}

/// Largest entrywise deviation of `m` from its conjugate transpose.
pub fn hermitian_deviation(m: &DMatrix<C64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let d = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in i..d {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn check_hermitian(m: &DMatrix<C64>, tol: f64) -> Result<()> {
    let scale = m.iter().fold(1.0f64, |acc, z| acc.max(z.norm()));
    let dev = hermitian_deviation(m);
    if dev > tol * scale {
        return Err(Error::NotHermitian(dev));
    }
    Ok(())
}

fn qubits_for_dim(dim: usize) -> Result<usize> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::Spec(format!("dimension {dim} is not a power of two")));
    }
    Ok(dim.trailing_zeros() as usize)
}

/// Sorted eigen-decomposition of a Hermitian matrix (ascending eigenvalues).
pub fn hermitian_eigh(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    n: usize,
    data: DMatrix<C64>,
}

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positivity (all to 1e-10).
    pub fn new(data: DMatrix<C64>) -> Result<Self> {
        if !data.is_square() {
            return Err(Error::InvalidState("density matrix must be square".into()));
        }
        let n = qubits_for_dim(data.nrows())?;
        if n > MAX_DENSE_QUBITS {
            return Err(Error::Size(format!("{n} qubits exceeds the dense cap of {MAX_DENSE_QUBITS}")));
        }
        let dev = hermitian_deviation(&data);
        if dev > HERMITIAN_TOL {
            return Err(Error::NotHermitian(dev));
        }
        let tr = data.trace();
        if (tr.re - 1.0).abs() > HERMITIAN_TOL || tr.im.abs() > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("trace is {tr}, expected 1")));
        }
        let (vals, _) = hermitian_eigh(&data);
        if vals[0] < -HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("negative eigenvalue {:.3e}", vals[0])));
        }
        Ok(DensityMatrix { n, data })
    }

    pub(crate) fn from_parts_unchecked(n: usize, data: DMatrix<C64>) -> Self {
        DensityMatrix { n, data }
    }

    pub fn maximally_mixed(n: usize) -> Result<Self> {
        if n > MAX_DENSE_QUBITS {
            return Err(Error::Size(format!("{n} qubits exceeds the dense cap")));
        }
        let dim = 1usize << n;
        Ok(DensityMatrix {
            n,
            data: DMatrix::identity(dim, dim) * C64::new(1.0 / dim as f64, 0.0),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &DMatrix<C64> {
        &self.data
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigh(&self.data).0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PureState {
    n: usize,
    amplitudes: DVector<C64>,
}

impl PureState {
    /// Validates length `2^n` and unit norm (to 1e-10).
    pub fn new(amplitudes: DVector<C64>) -> Result<Self> {
        let n = qubits_for_dim(amplitudes.len())?;
        if n > MAX_PURE_QUBITS {
            return Err(Error::Size(format!("{n} qubits exceeds the pure-state cap of {MAX_PURE_QUBITS}")));
        }
        let norm2 = amplitudes.norm_squared();
        if (norm2 - 1.0).abs() > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("squared norm is {norm2}, expected 1")));
        }
        Ok(PureState { n, amplitudes })
    }

    /// Computational basis state `|index>`.
    pub fn basis(n: usize, index: usize) -> Result<Self> {
        if n > MAX_PURE_QUBITS {
            return Err(Error::Size(format!("{n} qubits exceeds the pure-state cap")));
        }
        let dim = 1usize << n;
        if index >= dim {
            return Err(Error::Spec(format!("basis index {index} out of range for {n} qubits")));
        }
        let mut v = DVector::zeros(dim);
        v[index] = C64::new(1.0, 0.0);
        Ok(PureState { n, amplitudes: v })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn to_density(&self) -> Result<DensityMatrix> {
        if self.n > MAX_DENSE_QUBITS {
            return Err(Error::Size(format!("{} qubits exceeds the dense cap", self.n)));
        }
        let a = &self.amplitudes;
        Ok(DensityMatrix::from_parts_unchecked(self.n, a * a.adjoint()))
    }

    /// Non-zero amplitudes as `(basis index, amplitude)` pairs.
    pub fn sparse_terms(&self, tol: f64) -> Vec<(u64, C64)> {
        self.amplitudes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.norm() > tol)
            .map(|(i, &a)| (i as u64, a))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantumState {
    Pure(PureState),
    Mixed(DensityMatrix),
}

impl QuantumState {
    pub fn n(&self) -> usize {
        match self {
            QuantumState::Pure(p) => p.n(),
            QuantumState::Mixed(d) => d.n(),
        }
    }

    pub fn to_density(&self) -> Result<DensityMatrix> {
        match self {
            QuantumState::Pure(p) => p.to_density(),
            QuantumState::Mixed(d) => Ok(d.clone()),
        }
    }

    /// Diagonal of the density matrix in the computational basis.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            QuantumState::Pure(p) => p.amplitudes.iter().map(|a| a.norm_sqr()).collect(),
            QuantumState::Mixed(d) => d.data.diagonal().iter().map(|z| z.re).collect(),
        }
    }

    /// Reduced density matrix on `sites`; `sites[k]` becomes bit `k` of the
    /// reduced basis index.
    pub fn reduced(&self, sites: &[usize]) -> Result<DMatrix<C64>> {
        let n = self.n();
        for (k, &s) in sites.iter().enumerate() {
            if s >= n || sites[..k].contains(&s) {
                return Err(Error::Spec(format!("invalid site list {sites:?} for {n} qubits")));
            }
        }
        let kept: u64 = sites.iter().map(|&s| 1u64 << s).sum();
        let dim = 1usize << n;
        let rdim = 1usize << sites.len();
        let local = |x: u64| -> usize {
            sites.iter().enumerate().map(|(k, &s)| (((x >> s) & 1) as usize) << k).sum()
        };
        let mut out = DMatrix::<C64>::zeros(rdim, rdim);
        match self {
            QuantumState::Pure(p) => {
                let a = &p.amplitudes;
                // group indices by the traced-out bits
                let rest_mask = (dim as u64 - 1) & !kept;
                let mut by_rest: std::collections::HashMap<u64, Vec<(usize, C64)>> =
                    std::collections::HashMap::new();
                for x in 0..dim as u64 {
                    if a[x as usize].norm_sqr() > 0.0 {
                        by_rest.entry(x & rest_mask).or_default().push((local(x), a[x as usize]));
                    }
                }
                for group in by_rest.values() {
                    for &(r, ar) in group {
                        for &(c, ac) in group {
                            out[(r, c)] += ar * ac.conj();
                        }
                    }
                }
            }
            QuantumState::Mixed(d) => {
                for x in 0..dim as u64 {
                    for ys in 0..rdim {
                        // y agrees with x outside the kept sites
                        let mut y = x & !kept;
                        for (k, &s) in sites.iter().enumerate() {
                            y |= (((ys >> k) & 1) as u64) << s;
                        }
                        out[(local(x), ys)] += d.data[(x as usize, y as usize)];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `exp(-beta H) / Tr exp(-beta H)` through the eigen-decomposition of `H`,
/// with the smallest eigenvalue shifted to zero before exponentiation.
pub fn thermal_state(h: &DMatrix<C64>, beta: f64) -> Result<DensityMatrix> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::NegativeBeta(beta));
    }
    if !h.is_square() {
        return Err(Error::Spec("Hamiltonian must be square".into()));
    }
    let n = qubits_for_dim(h.nrows())?;
    check_hermitian(h, HERMITIAN_TOL)?;
    let (vals, vecs) = hermitian_eigh(h);
    let e0 = vals[0];
    let weights: Vec<f64> = vals.iter().map(|&e| (-beta * (e - e0)).exp()).collect();
    let z: f64 = weights.iter().sum();
    let dim = h.nrows();
    let mut scaled = vecs.clone();
    for (c, w) in weights.iter().enumerate() {
        let f = C64::new(w / z, 0.0);
        for r in 0..dim {
            scaled[(r, c)] *= f;
        }
    }
    let mut rho = scaled * vecs.adjoint();
    // exact Hermitian symmetry
    rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
    Ok(DensityMatrix::from_parts_unchecked(n, rho))
}

/// Normalized eigenvector of the smallest eigenvalue, with the global phase
/// fixed so the largest-magnitude amplitude is real and positive.
pub fn ground_state(h: &DMatrix<C64>, degeneracy_tol: f64) -> Result<PureState> {
    if !h.is_square() {
        return Err(Error::Spec("Hamiltonian must be square".into()));
    }
    let n = qubits_for_dim(h.nrows())?;
    check_hermitian(h, HERMITIAN_TOL)?;
    let (vals, vecs) = hermitian_eigh(h);
    if vals.len() > 1 {
        let gap = vals[1] - vals[0];
        if gap < degeneracy_tol {
            return Err(Error::Degenerate { gap, tol: degeneracy_tol });
        }
    }
    let mut v: DVector<C64> = vecs.column(0).into_owned();
    let norm = v.norm();
    v /= C64::new(norm, 0.0);
    let biggest = v.iter().fold(0.0f64, |acc, a| acc.max(a.norm()));
    // first index within rounding of the maximum, so ties resolve deterministically
    let pivot = v.iter().position(|a| a.norm() >= biggest * (1.0 - 1e-12)).unwrap_or(0);
    let phase = v[pivot] / v[pivot].norm();
    v /= phase;
    v[pivot] = C64::new(v[pivot].re, 0.0);
    Ok(PureState { n, amplitudes: v })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GhzVariant {
    Plus,
    Minus,
    /// `(1 - p)|GHZ+><GHZ+| + p|GHZ-><GHZ-|`
    Mixture(f64),
}

/// GHZ states `(|0..0> +- |1..1>)/sqrt 2` and their two-component mixtures.
pub fn ghz_family(n: usize, variant: GhzVariant) -> Result<QuantumState> {
    if n == 0 {
        return Err(Error::Spec("GHZ state needs at least one qubit".into()));
    }
    let ghz = |sign: f64| -> Result<PureState> {
        if n > MAX_PURE_QUBITS {
            return Err(Error::Size(format!("{n} qubits exceeds the pure-state cap")));
        }
        let dim = 1usize << n;
        let mut v = DVector::zeros(dim);
        let a = std::f64::consts::FRAC_1_SQRT_2;
        v[0] = C64::new(a, 0.0);
        v[dim - 1] += C64::new(sign * a, 0.0);
        Ok(PureState { n, amplitudes: v })
    };
    match variant {
        GhzVariant::Plus => Ok(QuantumState::Pure(ghz(1.0)?)),
        GhzVariant::Minus => Ok(QuantumState::Pure(ghz(-1.0)?)),
        GhzVariant::Mixture(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("mixture weight p = {p} is outside [0, 1]")));
            }
            if n > MAX_DENSE_QUBITS {
                return Err(Error::Size(format!("{n} qubits exceeds the dense cap")));
            }
            let plus = ghz(1.0)?.to_density()?;
            let minus = ghz(-1.0)?.to_density()?;
            let data = plus.data * C64::new(1.0 - p, 0.0) + minus.data * C64::new(p, 0.0);
            Ok(QuantumState::Mixed(DensityMatrix::from_parts_unchecked(n, data)))
        }
    }
}

/// `Tr(rho P)` (or `<psi|P|psi>`) for a Pauli string `P`.
pub fn pauli_expectation_exact(state: &QuantumState, pauli: &str) -> Result<f64> {
    let p = PauliString::parse(pauli, state.n())?;
    if p.flip == 0 && p.sign == 0 {
        // unit trace is a state invariant
        return Ok(1.0);
    }
    let dim = 1u64 << state.n();
    let mut acc = C64::new(0.0, 0.0);
    match state {
        QuantumState::Pure(s) => {
            let a = &s.amplitudes;
            for x in 0..dim {
                acc += a[(x ^ p.flip) as usize].conj() * p.phase(x) * a[x as usize];
            }
        }
        QuantumState::Mixed(d) => {
            for x in 0..dim {
                acc += p.phase(x) * d.data[(x as usize, (x ^ p.flip) as usize)];
            }
        }
    }
    if acc.im.abs() > 1e-10 {
        return Err(Error::InvalidState(format!(
            "expectation of {pauli} has imaginary part {:.3e}",
            acc.im
        )));
    }
    Ok(acc.re)
}

/// `Tr(rho H)` for a dense operator.
pub fn expectation_dense(state: &QuantumState, op: &DMatrix<C64>) -> Result<f64> {
    let dim = 1usize << state.n();
    if op.nrows() != dim || op.ncols() != dim {
        return Err(Error::Spec("operator dimension does not match the state".into()));
    }
    let v = match state {
        QuantumState::Pure(s) => (s.amplitudes.adjoint() * op * &s.amplitudes)[(0, 0)],
        QuantumState::Mixed(d) => (&d.data * op).trace(),
    };
    Ok(v.re)
}
