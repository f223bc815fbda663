//! Parametric local-energy families.
//!
//! A local energy of spin `u` is a map `f: [q]^(n-1) -> R^q`. The energy
//! contribution of spin `u` is `<phi(sigma_u), f(sigma_\u)>` with centered
//! deltas `phi_a(x) = [a == x] - 1/q`, so `f` is only defined up to adding a
//! constant to all of its `q` outputs.
//!
//! Every family evaluates on a full configuration row and ignores the entry of
//! its own spin. Gradients are exposed as vector-Jacobian products
//! ([`LocalEnergyFn::backward`]) since every loss in this crate contracts the
//! `q` outputs against an upstream vector anyway.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Centered delta `phi_a(x) = [a == x] - 1/q`.
#[inline]
pub fn centered_delta(a: usize, x: usize, q: usize) -> f64 {
    (if a == x { 1.0 } else { 0.0 }) - 1.0 / q as f64
}

/// `+1` for symbol 0, `-1` for symbol 1 (binary alphabets).
#[inline]
pub fn spin_value(symbol: u8) -> f64 {
    if symbol == 0 {
        1.0
    } else {
        -1.0
    }
}

pub trait LocalEnergyFn {
    fn spin(&self) -> usize;
    fn n(&self) -> usize;
    fn q(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Writes `f(config)` into `out` (length `q`).
    fn value_into(&self, config: &[u8], out: &mut [f64]);

    /// `grad += sum_a upstream[a] * d f_a / d theta`.
    fn backward(&self, config: &[u8], upstream: &[f64], grad: &mut [f64]);

    /// Pin the output gauge (no-op for unpinned families).
    fn project_gauge(&mut self) {}

    /// True when the IS loss is convex in the parameters.
    fn is_convex(&self) -> bool;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn value(&self, config: &[u8]) -> Vec<f64> {
        let mut out = vec![0.0; self.q()];
        self.value_into(config, &mut out);
        out
    }

    /// Value and full Jacobian (`q` rows of parameter gradients).
    fn value_grad(&self, config: &[u8]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let q = self.q();
        let jac = (0..q)
            .map(|a| {
                let mut up = vec![0.0; q];
                up[a] = 1.0;
                let mut g = vec![0.0; self.num_params()];
                self.backward(config, &up, &mut g);
                g
            })
            .collect();
        (self.value(config), jac)
    }
}

fn check_dims(spin: usize, n: usize, q: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Spec(format!("local energies need at least 2 spins, got n={n}")));
    }
    if spin >= n {
        return Err(Error::Spec(format!("spin {spin} out of range for n={n}")));
    }
    if !(2..=255).contains(&q) {
        return Err(Error::Spec(format!("alphabet size q={q} must be in 2..=255")));
    }
    Ok(())
}

/// Subsets of `items` of size `0..=max_size`, by size then lexicographically.
fn subsets_up_to(items: &[usize], max_size: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<(Vec<usize>, usize)> = vec![(Vec::new(), 0)];
    for _ in 0..max_size.min(items.len()) {
        let mut next = Vec::new();
        for (set, start) in &frontier {
            for k in *start..items.len() {
                let mut s = set.clone();
                s.push(items[k]);
                next.push((s, k + 1));
            }
        }
        out.extend(next.iter().map(|(s, _)| s.clone()));
        frontier = next;
    }
    out
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Total parameter count of a polynomial model with every spin coupled to all
/// others, up to interaction order `max_order`.
pub fn poly_param_count(n: usize, q: usize, max_order: usize) -> usize {
    let per_spin: usize = (0..max_order)
        .map(|k| {
            let block = if q == 2 { 1 } else { q.pow(k as u32 + 1) };
            binomial(n - 1, k) * block
        })
        .sum();
    n * per_spin
}

/// Polynomial local energy.
///
/// For `q = 2` the Ising form is used: one coefficient `J_K` per neighbour
/// subset `K` and `f = (h, -h)` with `h = sum_K J_K prod_{j in K} s_j`, so the
/// local energy is `sum_K J_K s_u prod_{j in K} s_j`. For `q > 2` the
/// centered-delta tensor basis is used: `f_a = sum_{K, b_K} c(a, K, b_K)
/// prod_{j in K} phi_{b_j}(sigma_j)`. Interaction order of a term is `|K| + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyParams {
    spin: usize,
    n: usize,
    q: usize,
    max_order: usize,
    neighbors: Vec<usize>,
    terms: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    coef: Vec<f64>,
}

impl PolyParams {
    /// All subsets of `neighbors` (default: every other spin) of size below `max_order`.
    pub fn new(spin: usize, n: usize, q: usize, max_order: usize, neighbors: Option<Vec<usize>>) -> Result<Self> {
        check_dims(spin, n, q)?;
        if max_order == 0 {
            return Err(Error::Spec("polynomial order must be at least 1".into()));
        }
        let mut neighbors = neighbors.unwrap_or_else(|| (0..n).filter(|&j| j != spin).collect());
        neighbors.sort_unstable();
        neighbors.dedup();
        if let Some(&bad) = neighbors.iter().find(|&&j| j == spin || j >= n) {
            return Err(Error::Spec(format!("invalid neighbour {bad} for spin {spin}")));
        }
        let terms = subsets_up_to(&neighbors, max_order - 1);
        let mut offsets = Vec::with_capacity(terms.len());
        let mut total = 0usize;
        for t in &terms {
            offsets.push(total);
            total += if q == 2 { 1 } else { q.pow(t.len() as u32 + 1) };
        }
        Ok(PolyParams { spin, n, q, max_order, neighbors, terms, offsets, coef: vec![0.0; total] })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn terms(&self) -> &[Vec<usize>] {
        &self.terms
    }

    /// Coefficient block of term `t` (length 1 for q = 2, `q^(|K|+1)` otherwise).
    pub fn block(&self, t: usize) -> &[f64] {
        let end = self.offsets.get(t + 1).copied().unwrap_or(self.coef.len());
        &self.coef[self.offsets[t]..end]
    }

    pub fn term_index(&self, subset: &[usize]) -> Option<usize> {
        self.terms.iter().position(|t| t == subset)
    }

    /// Ising coefficient `J_K` (q = 2 only).
    pub fn ising_coefficient(&self, subset: &[usize]) -> Option<f64> {
        if self.q != 2 {
            return None;
        }
        self.term_index(subset).map(|t| self.coef[self.offsets[t]])
    }

    pub fn set_ising_coefficient(&mut self, subset: &[usize], value: f64) -> Result<()> {
        if self.q != 2 {
            return Err(Error::Spec("Ising coefficients exist only for q = 2".into()));
        }
        let t = self
            .term_index(subset)
            .ok_or_else(|| Error::Spec(format!("no term for neighbour set {subset:?}")))?;
        self.coef[self.offsets[t]] = value;
        Ok(())
    }

    /// Weights `prod_{j in K} phi_{b_j}(sigma_j)` over all `b_K`, first
    /// neighbour of `K` as the fastest index.
    fn basis_weights(&self, term: &[usize], config: &[u8], buf: &mut Vec<f64>) {
        let q = self.q;
        buf.clear();
        buf.push(1.0);
        for &j in term {
            let x = config[j] as usize;
            let len = buf.len();
            buf.resize(len * q, 0.0);
            for b in (0..q).rev() {
                let phi = centered_delta(b, x, q);
                for i in 0..len {
                    buf[b * len + i] = buf[i] * phi;
                }
            }
        }
    }

    fn ising_monomial(term: &[usize], config: &[u8]) -> f64 {
        term.iter().fold(1.0, |acc, &j| acc * spin_value(config[j]))
    }
}

impl LocalEnergyFn for PolyParams {
    fn spin(&self) -> usize {
        self.spin
    }
    fn n(&self) -> usize {
        self.n
    }
    fn q(&self) -> usize {
        self.q
    }
    fn params(&self) -> &[f64] {
        &self.coef
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.coef
    }
    fn is_convex(&self) -> bool {
        true
    }

    fn value_into(&self, config: &[u8], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.q == 2 {
            let h: f64 = self
                .terms
                .iter()
                .zip(&self.coef)
                .map(|(t, j)| j * Self::ising_monomial(t, config))
                .sum();
            out[0] = h;
            out[1] = -h;
            return;
        }
        let q = self.q;
        let mut w = Vec::with_capacity(q.pow(self.max_order as u32 - 1));
        for (t, term) in self.terms.iter().enumerate() {
            self.basis_weights(term, config, &mut w);
            let block = &self.coef[self.offsets[t]..self.offsets[t] + w.len() * q];
            for (wb, chunk) in w.iter().zip(block.chunks_exact(q)) {
                for (o, c) in out.iter_mut().zip(chunk) {
                    *o += wb * c;
                }
            }
        }
    }

    fn backward(&self, config: &[u8], upstream: &[f64], grad: &mut [f64]) {
        if self.q == 2 {
            let d = upstream[0] - upstream[1];
            for (t, term) in self.terms.iter().enumerate() {
                grad[self.offsets[t]] += d * Self::ising_monomial(term, config);
            }
            return;
        }
        let q = self.q;
        let mut w = Vec::with_capacity(q.pow(self.max_order as u32 - 1));
        for (t, term) in self.terms.iter().enumerate() {
            self.basis_weights(term, config, &mut w);
            let block = &mut grad[self.offsets[t]..self.offsets[t] + w.len() * q];
            for (wb, chunk) in w.iter().zip(block.chunks_exact_mut(q)) {
                for (g, u) in chunk.iter_mut().zip(upstream) {
                    *g += wb * u;
                }
            }
        }
    }

    /// Zero-sum over the output index and over every `b_j` index. Each of
    /// these shifts leaves `<phi(sigma_u), f>` unchanged.
    fn project_gauge(&mut self) {
        if self.q == 2 {
            return;
        }
        let q = self.q;
        for (t, term) in self.terms.iter().enumerate() {
            let start = self.offsets[t];
            let len = q.pow(term.len() as u32 + 1);
            let block = &mut self.coef[start..start + len];
            let mut stride = 1;
            for _axis in 0..=term.len() {
                for base in 0..len {
                    if (base / stride) % q != 0 {
                        continue;
                    }
                    let mean: f64 = (0..q).map(|k| block[base + k * stride]).sum::<f64>() / q as f64;
                    for k in 0..q {
                        block[base + k * stride] -= mean;
                    }
                }
                stride *= q;
            }
        }
    }
}

/// Input encoding of the neural family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputEncoding {
    /// One `+-1` scalar per other spin (binary alphabets).
    PlusMinus,
    /// Concatenated centered one-hot vectors, `(n-1) q` inputs.
    CenteredOneHot,
    /// Raw 1-based symbol values, one scalar per other spin.
    Raw,
}

impl InputEncoding {
    pub fn default_for(q: usize) -> Self {
        if q == 2 {
            InputEncoding::PlusMinus
        } else {
            InputEncoding::CenteredOneHot
        }
    }

    pub fn input_dim(&self, n: usize, q: usize) -> usize {
        match self {
            InputEncoding::CenteredOneHot => (n - 1) * q,
            _ => n - 1,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x / (1 + e^-x)`.
#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Feed-forward network with `depth` swish hidden layers of equal `width`
/// and a linear output layer of size `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralParams {
    spin: usize,
    n: usize,
    q: usize,
    depth: usize,
    width: usize,
    encoding: InputEncoding,
    /// `(out, in)` per layer.
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl NeuralParams {
    /// Zero-initialized network.
    pub fn zeros(spin: usize, n: usize, q: usize, depth: usize, width: usize, encoding: InputEncoding) -> Result<Self> {
        check_dims(spin, n, q)?;
        if depth > 0 && width == 0 {
            return Err(Error::Spec("hidden layers need a positive width".into()));
        }
        if encoding == InputEncoding::PlusMinus && q != 2 {
            return Err(Error::Spec("plus-minus encoding requires q = 2".into()));
        }
        let input = encoding.input_dim(n, q);
        let mut shapes = Vec::with_capacity(depth + 1);
        let mut prev = input;
        for _ in 0..depth {
            shapes.push((width, prev));
            prev = width;
        }
        shapes.push((q, prev));
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for &(o, i) in &shapes {
            offsets.push(total);
            total += o * i + o;
        }
        Ok(NeuralParams { spin, n, q, depth, width, encoding, shapes, offsets, params: vec![0.0; total] })
    }

    /// Glorot-uniform weights and zero biases from a seeded stream.
    pub fn new(spin: usize, n: usize, q: usize, depth: usize, width: usize, encoding: InputEncoding, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spin, n, q, depth, width, encoding)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.shapes.len() {
            let (o, i) = net.shapes[l];
            let limit = (6.0 / (o + i) as f64).sqrt();
            let off = net.offsets[l];
            for w in &mut net.params[off..off + o * i] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn encoding(&self) -> InputEncoding {
        self.encoding
    }
    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }
    pub fn input_dim(&self) -> usize {
        self.shapes[0].1
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (o, i) = self.shapes[layer];
        &self.params[self.offsets[layer]..self.offsets[layer] + o * i]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (o, i) = self.shapes[layer];
        let start = self.offsets[layer] + o * i;
        &self.params[start..start + o]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (o, i) = self.shapes[layer];
        let start = self.offsets[layer] + o * i;
        &mut self.params[start..start + o]
    }

    /// Encoded network input for `config` (own spin skipped).
    pub fn encode_into(&self, config: &[u8], out: &mut Vec<f64>) {
        out.clear();
        for (j, &s) in config.iter().enumerate() {
            if j == self.spin {
                continue;
            }
            match self.encoding {
                InputEncoding::PlusMinus => out.push(spin_value(s)),
                InputEncoding::Raw => out.push(s as f64 + 1.0),
                InputEncoding::CenteredOneHot => {
                    out.extend((0..self.q).map(|b| centered_delta(b, s as usize, self.q)))
                }
            }
        }
    }

    /// Forward pass keeping every pre-activation; returns the output layer.
    fn forward(&self, x: &[f64], pre: &mut Vec<Vec<f64>>) -> Vec<f64> {
        pre.clear();
        let mut h = x.to_vec();
        let last = self.shapes.len() - 1;
        for (l, &(o, i)) in self.shapes.iter().enumerate() {
            let w = self.weights(l);
            let b = self.bias(l);
            let z: Vec<f64> = (0..o)
                .map(|r| b[r] + w[r * i..(r + 1) * i].iter().zip(&h).map(|(a, x)| a * x).sum::<f64>())
                .collect();
            h = if l == last { z.clone() } else { z.iter().map(|&v| swish(v)).collect() };
            pre.push(z);
        }
        h
    }

    /// Batched forward pass; `x` is `input_dim x batch`. Returns the
    /// activations cache (inputs of every layer and pre-activations).
    pub(crate) fn forward_batch(&self, x: DMatrix<f64>) -> BatchCache {
        let mut inputs = Vec::with_capacity(self.shapes.len());
        let mut pre = Vec::with_capacity(self.shapes.len());
        let mut h = x;
        let last = self.shapes.len() - 1;
        for (l, &(o, i)) in self.shapes.iter().enumerate() {
            let w = DMatrix::from_row_slice(o, i, self.weights(l));
            let mut z = &w * &h;
            let b = self.bias(l);
            for mut col in z.column_iter_mut() {
                for (v, bb) in col.iter_mut().zip(b) {
                    *v += bb;
                }
            }
            let next = if l == last { z.clone() } else { z.map(swish) };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        BatchCache { inputs, pre, output: h }
    }

    /// Accumulates the parameter gradient for upstream `g` (`q x batch`).
    pub(crate) fn backward_batch(&self, cache: &BatchCache, upstream: DMatrix<f64>, grad: &mut [f64]) {
        let mut delta = upstream;
        let last = self.shapes.len() - 1;
        for l in (0..=last).rev() {
            let (o, i) = self.shapes[l];
            if l != last {
                delta.component_mul_assign(&cache.pre[l].map(swish_grad));
            }
            let dw = &delta * cache.inputs[l].transpose();
            let off = self.offsets[l];
            for r in 0..o {
                for c in 0..i {
                    grad[off + r * i + c] += dw[(r, c)];
                }
                grad[off + o * i + r] += delta.row(r).sum();
            }
            if l > 0 {
                let w = DMatrix::from_row_slice(o, i, self.weights(l));
                delta = w.transpose() * &delta;
            }
        }
    }
}

pub(crate) struct BatchCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    pub(crate) output: DMatrix<f64>,
}

impl LocalEnergyFn for NeuralParams {
    fn spin(&self) -> usize {
        self.spin
    }
    fn n(&self) -> usize {
        self.n
    }
    fn q(&self) -> usize {
        self.q
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn is_convex(&self) -> bool {
        false
    }

    fn value_into(&self, config: &[u8], out: &mut [f64]) {
        let mut x = Vec::with_capacity(self.input_dim());
        self.encode_into(config, &mut x);
        let mut h = x;
        let last = self.shapes.len() - 1;
        for (l, &(o, i)) in self.shapes.iter().enumerate() {
            let w = self.weights(l);
            let b = self.bias(l);
            let mut z = Vec::with_capacity(o);
            for r in 0..o {
                let row = &w[r * i..(r + 1) * i];
                let s: f64 = row.iter().zip(&h).map(|(a, x)| a * x).sum();
                z.push(if l == last { b[r] + s } else { swish(b[r] + s) });
            }
            h = z;
        }
        out.copy_from_slice(&h);
    }

    fn backward(&self, config: &[u8], upstream: &[f64], grad: &mut [f64]) {
        let mut x = Vec::with_capacity(self.input_dim());
        self.encode_into(config, &mut x);
        let mut pre = Vec::with_capacity(self.shapes.len());
        self.forward(&x, &mut pre);
        let last = self.shapes.len() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..=last).rev() {
            let (o, i) = self.shapes[l];
            if l != last {
                for (d, z) in delta.iter_mut().zip(&pre[l]) {
                    *d *= swish_grad(*z);
                }
            }
            let input: Vec<f64> = if l == 0 { x.clone() } else { pre[l - 1].iter().map(|&z| swish(z)).collect() };
            let off = self.offsets[l];
            for r in 0..o {
                for c in 0..i {
                    grad[off + r * i + c] += delta[r] * input[c];
                }
                grad[off + o * i + r] += delta[r];
            }
            if l > 0 {
                let w = self.weights(l);
                delta = (0..i).map(|c| (0..o).map(|r| w[r * i + c] * delta[r]).sum()).collect();
            }
        }
    }
}

/// Number of exact-sum count vectors (compositions of `n-1` into `q` parts).
pub fn sym_key_count(n: usize, q: usize) -> usize {
    binomial(n - 1 + q - 1, q - 1)
}

/// Permutation-symmetric local energy: a table from the count vector of the
/// other spins' symbols to `R^q`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymParams {
    spin: usize,
    n: usize,
    q: usize,
    keys: Vec<Vec<u16>>,
    /// Dense code of the first `q-1` counts -> key index.
    lookup: Vec<u32>,
    theta: Vec<f64>,
}

const MAX_SYM_LOOKUP: usize = 1 << 24;

impl SymParams {
    pub fn new(spin: usize, n: usize, q: usize) -> Result<Self> {
        check_dims(spin, n, q)?;
        let lookup_len = (n as u128).checked_pow(q as u32 - 1).unwrap_or(u128::MAX);
        if lookup_len > MAX_SYM_LOOKUP as u128 {
            return Err(Error::Size(format!("symmetric table for n={n}, q={q} is too large")));
        }
        let total = (n - 1) as u16;
        let mut keys = Vec::new();
        let mut cur = vec![0u16; q];
        compositions(total, 0, &mut cur, &mut keys);
        let mut lookup = vec![u32::MAX; lookup_len as usize];
        for (k, key) in keys.iter().enumerate() {
            lookup[Self::code(key, n)] = k as u32;
        }
        let theta = vec![0.0; keys.len() * q];
        Ok(SymParams { spin, n, q, keys, lookup, theta })
    }

    #[inline]
    fn code(counts: &[u16], n: usize) -> usize {
        counts[..counts.len() - 1].iter().rev().fold(0usize, |acc, &c| acc * n + c as usize)
    }

    pub fn keys(&self) -> &[Vec<u16>] {
        &self.keys
    }

    /// `counts[a]` = occurrences of symbol `a` among the other spins.
    pub fn counts(&self, config: &[u8]) -> Vec<u16> {
        let mut counts = vec![0u16; self.q];
        for (j, &s) in config.iter().enumerate() {
            if j != self.spin {
                counts[s as usize] += 1;
            }
        }
        counts
    }

    pub fn key_index(&self, counts: &[u16]) -> Option<usize> {
        if counts.len() != self.q || counts.iter().map(|&c| c as usize).sum::<usize>() != self.n - 1 {
            return None;
        }
        match self.lookup[Self::code(counts, self.n)] {
            u32::MAX => None,
            k => Some(k as usize),
        }
    }

    pub fn entry(&self, key: usize) -> &[f64] {
        &self.theta[key * self.q..(key + 1) * self.q]
    }

    pub fn entry_mut(&mut self, key: usize) -> &mut [f64] {
        &mut self.theta[key * self.q..(key + 1) * self.q]
    }

    #[inline]
    fn index_of_config(&self, config: &[u8]) -> usize {
        let mut counts = [0u16; 256];
        for (j, &s) in config.iter().enumerate() {
            if j != self.spin {
                counts[s as usize] += 1;
            }
        }
        self.lookup[Self::code(&counts[..self.q], self.n)] as usize
    }
}

fn compositions(remaining: u16, pos: usize, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
    if pos == cur.len() - 1 {
        cur[pos] = remaining;
        out.push(cur.clone());
        return;
    }
    for c in (0..=remaining).rev() {
        cur[pos] = c;
        compositions(remaining - c, pos + 1, cur, out);
    }
}

impl LocalEnergyFn for SymParams {
    fn spin(&self) -> usize {
        self.spin
    }
    fn n(&self) -> usize {
        self.n
    }
    fn q(&self) -> usize {
        self.q
    }
    fn params(&self) -> &[f64] {
        &self.theta
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
    fn is_convex(&self) -> bool {
        true
    }

    fn value_into(&self, config: &[u8], out: &mut [f64]) {
        let k = self.index_of_config(config);
        out.copy_from_slice(&self.theta[k * self.q..(k + 1) * self.q]);
    }

    fn backward(&self, config: &[u8], upstream: &[f64], grad: &mut [f64]) {
        let k = self.index_of_config(config);
        for (g, u) in grad[k * self.q..(k + 1) * self.q].iter_mut().zip(upstream) {
            *g += u;
        }
    }

    fn project_gauge(&mut self) {
        let q = self.q as f64;
        for chunk in self.theta.chunks_exact_mut(self.q) {
            let mean = chunk.iter().sum::<f64>() / q;
            chunk.iter_mut().for_each(|v| *v -= mean);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Poly(PolyParams),
    Neural(NeuralParams),
    Symmetric(SymParams),
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::Poly(_) => "poly",
            Family::Neural(_) => "neural",
            Family::Symmetric(_) => "symmetric",
        }
    }

    fn inner(&self) -> &dyn LocalEnergyFn {
        match self {
            Family::Poly(p) => p,
            Family::Neural(p) => p,
            Family::Symmetric(p) => p,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn LocalEnergyFn {
        match self {
            Family::Poly(p) => p,
            Family::Neural(p) => p,
            Family::Symmetric(p) => p,
        }
    }
}

/// One spin's local energy, optionally symmetrized under the global flip of
/// a binary alphabet.
///
/// The symmetrized local energy is `l(s_u, s) + l(-s_u, -s)`, i.e.
/// `f~_a(sigma) = f_a(sigma) + f_{1-a}(-sigma)`: contributions that are even
/// under the joint flip double and odd ones cancel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinEnergy {
    pub family: Family,
    spin_flip: bool,
}

impl SpinEnergy {
    pub fn new(family: Family) -> Self {
        SpinEnergy { family, spin_flip: false }
    }

    pub fn symmetrized(family: Family) -> Result<Self> {
        if family.inner().q() != 2 {
            return Err(Error::Spec(format!(
                "spin-flip symmetrization needs q = 2, got q = {}",
                family.inner().q()
            )));
        }
        Ok(SpinEnergy { family, spin_flip: true })
    }

    pub fn spin_flip(&self) -> bool {
        self.spin_flip
    }
}

fn flipped(config: &[u8]) -> Vec<u8> {
    config.iter().map(|&s| 1 - s).collect()
}

impl LocalEnergyFn for SpinEnergy {
    fn spin(&self) -> usize {
        self.family.inner().spin()
    }
    fn n(&self) -> usize {
        self.family.inner().n()
    }
    fn q(&self) -> usize {
        self.family.inner().q()
    }
    fn params(&self) -> &[f64] {
        self.family.inner().params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.family.inner_mut().params_mut()
    }
    fn is_convex(&self) -> bool {
        self.family.inner().is_convex()
    }
    fn project_gauge(&mut self) {
        self.family.inner_mut().project_gauge()
    }

    fn value_into(&self, config: &[u8], out: &mut [f64]) {
        let f = self.family.inner();
        f.value_into(config, out);
        if self.spin_flip {
            let mut other = [0.0; 2];
            f.value_into(&flipped(config), &mut other);
            out[0] += other[1];
            out[1] += other[0];
        }
    }

    fn backward(&self, config: &[u8], upstream: &[f64], grad: &mut [f64]) {
        let f = self.family.inner();
        f.backward(config, upstream, grad);
        if self.spin_flip {
            f.backward(&flipped(config), &[upstream[1], upstream[0]], grad);
        }
    }
}

// ---------------------------------------------------------------------------
// JSON encoding of parameters

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Corrupt(format!("invalid index list {s:?}"))))
        .collect()
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Corrupt(format!("missing field {key:?}")))
}

fn usize_field(v: &Value, key: &str) -> Result<usize> {
    field(v, key)?
        .as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Corrupt(format!("field {key:?} is not an unsigned integer")))
}

fn f64_value(v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::Corrupt(format!("expected a number, found {v}")))
}

fn f64_array(v: &Value) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::Corrupt("expected an array of numbers".into()))?
        .iter()
        .map(f64_value)
        .collect()
}

impl PolyParams {
    /// Sparse `[key, value]` list. Keys are `"j1,j2"` (q = 2) or
    /// `"a|j1,j2|b1,b2"` with 1-based symbols (q > 2).
    pub fn to_json(&self) -> Value {
        let q = self.q;
        let mut coefficients = Vec::new();
        for (t, term) in self.terms.iter().enumerate() {
            let block = self.block(t);
            if q == 2 {
                if block[0] != 0.0 {
                    coefficients.push(json!([join(term), block[0]]));
                }
                continue;
            }
            for (idx, &c) in block.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let a = idx % q + 1;
                let mut rest = idx / q;
                let b: Vec<usize> = term
                    .iter()
                    .map(|_| {
                        let s = rest % q + 1;
                        rest /= q;
                        s
                    })
                    .collect();
                coefficients.push(json!([format!("{a}|{}|{}", join(term), join(&b)), c]));
            }
        }
        json!({
            "spin": self.spin,
            "n": self.n,
            "q": self.q,
            "max_order": self.max_order,
            "neighbors": self.neighbors,
            "coefficients": coefficients,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let neighbors = field(v, "neighbors")?
            .as_array()
            .ok_or_else(|| Error::Corrupt("neighbors must be an array".into()))?
            .iter()
            .map(|x| x.as_u64().map(|x| x as usize).ok_or_else(|| Error::Corrupt("invalid neighbour".into())))
            .collect::<Result<Vec<_>>>()?;
        let mut p = PolyParams::new(
            usize_field(v, "spin")?,
            usize_field(v, "n")?,
            usize_field(v, "q")?,
            usize_field(v, "max_order")?,
            Some(neighbors),
        )?;
        let q = p.q;
        let entries = field(v, "coefficients")?
            .as_array()
            .ok_or_else(|| Error::Corrupt("coefficients must be an array".into()))?;
        for e in entries {
            let pair = e.as_array().filter(|a| a.len() == 2).ok_or_else(|| Error::Corrupt(format!("bad coefficient entry {e}")))?;
            let key = pair[0].as_str().ok_or_else(|| Error::Corrupt("coefficient key must be a string".into()))?;
            let value = f64_value(&pair[1])?;
            let bad_key = || Error::Corrupt(format!("unknown coefficient key {key:?}"));
            if q == 2 {
                let t = p.term_index(&parse_list(key)?).ok_or_else(bad_key)?;
                let off = p.offsets[t];
                p.coef[off] = value;
            } else {
                let parts: Vec<&str> = key.split('|').collect();
                if parts.len() != 3 {
                    return Err(bad_key());
                }
                let a = parts[0].parse::<usize>().map_err(|_| bad_key())?;
                let term = parse_list(parts[1])?;
                let b = parse_list(parts[2])?;
                let t = p.term_index(&term).ok_or_else(bad_key)?;
                if a == 0 || a > q || b.len() != term.len() || b.iter().any(|&s| s == 0 || s > q) {
                    return Err(bad_key());
                }
                let b_index = b.iter().rev().fold(0usize, |acc, &s| acc * q + (s - 1));
                let off = p.offsets[t];
                p.coef[off + b_index * q + (a - 1)] = value;
            }
        }
        Ok(p)
    }
}

impl NeuralParams {
    pub fn to_json(&self) -> Value {
        let layers: Vec<Value> = (0..self.shapes.len())
            .map(|l| json!({"weights": self.weights(l), "bias": self.bias(l)}))
            .collect();
        json!({
            "spin": self.spin,
            "n": self.n,
            "q": self.q,
            "depth": self.depth,
            "width": self.width,
            "encoding": self.encoding,
            "layers": layers,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let encoding: InputEncoding = serde_json::from_value(field(v, "encoding")?.clone())
            .map_err(|e| Error::Schema(format!("unknown input encoding: {e}")))?;
        let mut net = NeuralParams::zeros(
            usize_field(v, "spin")?,
            usize_field(v, "n")?,
            usize_field(v, "q")?,
            usize_field(v, "depth")?,
            usize_field(v, "width")?,
            encoding,
        )?;
        let layers = field(v, "layers")?
            .as_array()
            .ok_or_else(|| Error::Corrupt("layers must be an array".into()))?;
        if layers.len() != net.shapes.len() {
            return Err(Error::Corrupt(format!("expected {} layers, found {}", net.shapes.len(), layers.len())));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (o, i) = net.shapes[l];
            let w = f64_array(field(layer, "weights")?)?;
            let b = f64_array(field(layer, "bias")?)?;
            if w.len() != o * i || b.len() != o {
                return Err(Error::Corrupt(format!("layer {l} has the wrong shape")));
            }
            let off = net.offsets[l];
            net.params[off..off + o * i].copy_from_slice(&w);
            net.params[off + o * i..off + o * i + o].copy_from_slice(&b);
        }
        Ok(net)
    }
}

impl SymParams {
    /// Table keyed by count-vector strings `"c1,c2,...,cq"`.
    pub fn to_json(&self) -> Value {
        let table: BTreeMap<String, Vec<f64>> =
            self.keys.iter().enumerate().map(|(k, key)| (join(key), self.entry(k).to_vec())).collect();
        json!({"spin": self.spin, "n": self.n, "q": self.q, "table": table})
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let mut p = SymParams::new(usize_field(v, "spin")?, usize_field(v, "n")?, usize_field(v, "q")?)?;
        let table = field(v, "table")?
            .as_object()
            .ok_or_else(|| Error::Corrupt("table must be an object".into()))?;
        for (key, values) in table {
            let counts: Vec<u16> = parse_list(key)?.into_iter().map(|c| c as u16).collect();
            let k = p.key_index(&counts).ok_or_else(|| Error::Corrupt(format!("invalid count key {key:?}")))?;
            let vals = f64_array(values)?;
            if vals.len() != p.q {
                return Err(Error::Corrupt(format!("entry {key:?} has {} values", vals.len())));
            }
            p.entry_mut(k).copy_from_slice(&vals);
        }
        Ok(p)
    }
}

impl SpinEnergy {
    pub fn to_json(&self) -> Value {
        let params = match &self.family {
            Family::Poly(p) => p.to_json(),
            Family::Neural(p) => p.to_json(),
            Family::Symmetric(p) => p.to_json(),
        };
        json!({"family": self.family.tag(), "spin_flip": self.spin_flip, "params": params})
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let tag = field(v, "family")?
            .as_str()
            .ok_or_else(|| Error::Corrupt("family tag must be a string".into()))?;
        let params = field(v, "params")?;
        let family = match tag {
            "poly" => Family::Poly(PolyParams::from_json(params)?),
            "neural" => Family::Neural(NeuralParams::from_json(params)?),
            "symmetric" => Family::Symmetric(SymParams::from_json(params)?),
            other => return Err(Error::Schema(format!("unknown family tag {other:?}"))),
        };
        let flip = v.get("spin_flip").and_then(Value::as_bool).unwrap_or(false);
        if flip {
            SpinEnergy::symmetrized(family)
        } else {
            Ok(SpinEnergy::new(family))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn local_energy(f: &dyn LocalEnergyFn, config: &[u8]) -> f64 {
        let v = f.value(config);
        let q = f.q();
        let s = config[f.spin()] as usize;
        (0..q).map(|a| centered_delta(a, s, q) * v[a]).sum()
    }

    #[test]
    fn zero_poly_is_zero() {
        for q in [2, 3, 4] {
            let p = PolyParams::new(1, 4, q, 3, None).unwrap();
            assert!(p.value(&[0, 1, 1, 0]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ising_local_energy() {
        let mut p = PolyParams::new(0, 2, 2, 2, None).unwrap();
        p.set_ising_coefficient(&[1], 0.5).unwrap();
        // both spins +1 (symbol 0)
        assert!((local_energy(&p, &[0, 0]) - 0.5).abs() < 1e-15);
        assert!((local_energy(&p, &[1, 0]) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn poly_counts() {
        assert_eq!(poly_param_count(30, 2, 2), 900);
        let p = PolyParams::new(3, 30, 2, 2, None).unwrap();
        assert_eq!(p.num_params(), 30);
        let p = PolyParams::new(0, 5, 4, 3, None).unwrap();
        assert_eq!(p.num_params(), 4 + 4 * 16 + 6 * 64);
        assert_eq!(poly_param_count(5, 4, 3), 5 * p.num_params());
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0), 0.0);
        assert!((swish(10.0) - 9.99955).abs() < 1e-5);
    }

    #[test]
    fn zero_net_outputs_last_bias() {
        let mut net = NeuralParams::zeros(0, 4, 4, 2, 8, InputEncoding::CenteredOneHot).unwrap();
        net.bias_mut(2).copy_from_slice(&[0.1, -0.2, 0.3, 0.4]);
        for config in [[0u8, 1, 2, 3], [3, 3, 3, 3]] {
            assert_eq!(net.value(&config), vec![0.1, -0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn net_parameter_count() {
        // input 6 = (n - 1) with n = 7 under the raw encoding
        let net = NeuralParams::zeros(0, 7, 4, 2, 8, InputEncoding::Raw).unwrap();
        assert_eq!(net.input_dim(), 6);
        assert_eq!(net.num_params(), 164);
    }

    #[test]
    fn sym_counts_and_keys() {
        let p = SymParams::new(0, 7, 4).unwrap();
        assert_eq!(p.keys().len(), 84);
        assert_eq!(sym_key_count(7, 4), 84);
        // own spin at position 0 is skipped: (1,1,2,4,4,4) after it
        let config = [2u8, 0, 0, 1, 3, 3, 3];
        assert_eq!(p.counts(&config), vec![2, 1, 0, 3]);
        assert!(p.keys().iter().all(|k| k.iter().map(|&c| c as usize).sum::<usize>() == 6));
    }

    #[test]
    fn constant_sym_table() {
        let mut p = SymParams::new(2, 5, 3).unwrap();
        for k in 0..p.keys().len() {
            p.entry_mut(k).copy_from_slice(&[0.5, -0.25, -0.25]);
        }
        for config in [[0u8, 0, 0, 0, 0], [2, 1, 0, 2, 1]] {
            assert_eq!(p.value(&config), vec![0.5, -0.25, -0.25]);
        }
    }

    #[test]
    fn spin_flip_parity() {
        // odd under the joint flip: a pure field term
        let mut odd = PolyParams::new(0, 3, 2, 2, None).unwrap();
        odd.set_ising_coefficient(&[], 0.7).unwrap();
        let odd = SpinEnergy::symmetrized(Family::Poly(odd)).unwrap();
        assert!(odd.value(&[0, 1, 0]).iter().all(|v| v.abs() < 1e-15));

        // even: a pair coupling doubles
        let mut even = PolyParams::new(0, 3, 2, 2, None).unwrap();
        even.set_ising_coefficient(&[2], 0.4).unwrap();
        let base = even.value(&[0, 1, 1]);
        let sym = SpinEnergy::symmetrized(Family::Poly(even)).unwrap();
        let v = sym.value(&[0, 1, 1]);
        assert!((v[0] - 2.0 * base[0]).abs() < 1e-15 && (v[1] - 2.0 * base[1]).abs() < 1e-15);

        let potts = PolyParams::new(0, 3, 3, 2, None).unwrap();
        assert!(SpinEnergy::symmetrized(Family::Poly(potts)).is_err());
    }

    #[test]
    fn gauge_projection_preserves_local_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = PolyParams::new(1, 4, 3, 3, None).unwrap();
        p.params_mut().iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        let configs: Vec<Vec<u8>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(0..3u8)).collect()).collect();
        let before: Vec<f64> = configs.iter().map(|c| local_energy(&p, c)).collect();
        p.project_gauge();
        for (c, b) in configs.iter().zip(before) {
            assert!((local_energy(&p, c) - b).abs() < 1e-12);
            assert!(p.value(c).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn batched_and_single_row_nets_agree() {
        let net = NeuralParams::new(2, 5, 4, 3, 7, InputEncoding::CenteredOneHot, 9).unwrap();
        let configs: Vec<Vec<u8>> = vec![vec![0, 1, 2, 3, 0], vec![3, 3, 1, 0, 2], vec![1, 1, 1, 1, 1]];
        let mut cols = Vec::new();
        let mut buf = Vec::new();
        for c in &configs {
            net.encode_into(c, &mut buf);
            cols.extend_from_slice(&buf);
        }
        let x = DMatrix::from_column_slice(net.input_dim(), configs.len(), &cols);
        let cache = net.forward_batch(x);
        let upstream = DMatrix::from_fn(4, configs.len(), |r, c| (r as f64 + 1.0) * (c as f64 - 0.5));
        let mut g_batch = vec![0.0; net.num_params()];
        net.backward_batch(&cache, upstream.clone(), &mut g_batch);
        let mut g_single = vec![0.0; net.num_params()];
        for (k, c) in configs.iter().enumerate() {
            let v = net.value(c);
            for a in 0..4 {
                assert!((v[a] - cache.output[(a, k)]).abs() < 1e-12);
            }
            let up: Vec<f64> = upstream.column(k).iter().cloned().collect();
            net.backward(c, &up, &mut g_single);
        }
        for (a, b) in g_batch.iter().zip(&g_single) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut poly = PolyParams::new(2, 4, 3, 3, Some(vec![0, 1, 3])).unwrap();
        poly.params_mut().iter_mut().for_each(|c| *c = rng.random_range(-2.0..2.0));
        let mut sym = SymParams::new(0, 5, 4).unwrap();
        sym.params_mut().iter_mut().for_each(|c| *c = rng.random::<f64>() * 1e-7);
        let net = NeuralParams::new(1, 4, 2, 2, 5, InputEncoding::PlusMinus, 3).unwrap();
        let mut ising = PolyParams::new(0, 3, 2, 3, None).unwrap();
        ising.params_mut().iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        for e in [
            SpinEnergy::new(Family::Poly(poly)),
            SpinEnergy::new(Family::Symmetric(sym)),
            SpinEnergy::symmetrized(Family::Neural(net)).unwrap(),
            SpinEnergy::new(Family::Poly(ising)),
        ] {
            let text = serde_json::to_string(&e.to_json()).unwrap();
            let back = SpinEnergy::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
            assert_eq!(back, e);
        }
    }

    #[test]
    fn unknown_family_is_schema_error() {
        let v = json!({"family": "rbm", "params": {}});
        assert!(matches!(SpinEnergy::from_json(&v), Err(Error::Schema(_))));
    }
}
