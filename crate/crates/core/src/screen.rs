//! Interaction Screening: losses, optimizers and model fitting.
//!
//! The IS loss of spin `u` is the average of `exp(-<phi(sigma_u), f(sigma_\u)>)`
//! over the data. Its population minimizer is the true local energy, so every
//! spin is learned from its own convex (poly, symmetric) or non-convex
//! (neural) problem, independently of the others.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ebm::{EnergyModel, Symmetry};
use crate::error::{Error, Result};
use crate::families::{
    centered_delta, Family, InputEncoding, LocalEnergyFn, NeuralParams, PolyParams, SpinEnergy, SymParams,
};
use crate::povm::{ProbTable, SampleSet};

/// Exponents of the IS loss are clipped to `[-EXP_CLIP, EXP_CLIP]`.
pub const EXP_CLIP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Poly,
    Neural,
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    GdBacktracking,
    EntropicMirror,
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::GdBacktracking => "gd-backtracking",
            OptimizerKind::EntropicMirror => "entropic-mirror",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Family, optimizer and schedule of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub family: FamilyKind,
    /// Polynomial interaction order `L`.
    pub max_order: usize,
    /// Neural hidden layers `d`.
    pub depth: usize,
    /// Neural hidden width `w`.
    pub width: usize,
    /// Neural input encoding; defaults by alphabet size.
    pub encoding: Option<InputEncoding>,
    /// Symmetrize every local energy under the global flip (q = 2).
    pub spin_flip: bool,
    /// Defaults to gd-backtracking for convex families and adam for neural.
    pub optimizer: Option<OptimizerKind>,
    /// Initial adam rate.
    pub learning_rate: f64,
    /// Inverse-time decay: `rate = learning_rate / (1 + lr_decay * epoch)`.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Gradient-norm (or l1-ball optimality gap) stopping tolerance.
    pub tol: f64,
    /// Adam stops after `patience` epochs without a loss improvement of at
    /// least `early_stop_delta`.
    pub early_stop_delta: f64,
    pub patience: usize,
    /// Share of rows held out for early stopping of the neural family
    /// (0 watches the training loss instead).
    pub validation_fraction: f64,
    /// For shared symmetries, fit the single block on all `n` rotated views
    /// of every row instead of spin 0's view only.
    pub pool_views: bool,
    /// Radius of the l1 ball for entropic mirror descent.
    pub l1_radius: Option<f64>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            family: FamilyKind::Poly,
            max_order: 2,
            depth: 3,
            width: 15,
            encoding: None,
            spin_flip: false,
            optimizer: None,
            learning_rate: 1e-2,
            lr_decay: 0.05,
            batch_size: 500,
            max_epochs: 5000,
            tol: 1e-7,
            early_stop_delta: 1e-6,
            patience: 10,
            validation_fraction: 0.0,
            pool_views: true,
            l1_radius: None,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn poly(max_order: usize) -> Self {
        FitConfig { family: FamilyKind::Poly, max_order, ..Default::default() }
    }

    pub fn symmetric() -> Self {
        FitConfig { family: FamilyKind::Symmetric, ..Default::default() }
    }

    pub fn neural(depth: usize, width: usize) -> Self {
        FitConfig { family: FamilyKind::Neural, depth, width, max_epochs: 200, ..Default::default() }
    }

    pub fn optimizer(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.family {
            FamilyKind::Neural => OptimizerKind::Adam,
            _ => OptimizerKind::GdBacktracking,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay >= 0.0) || !(self.tol > 0.0) || !(self.early_stop_delta >= 0.0) {
            return bad("lr_decay, tol and early_stop_delta must be non-negative (tol positive)".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.family == FamilyKind::Poly && self.max_order == 0 {
            return bad("max_order must be at least 1".into());
        }
        let opt = self.optimizer();
        match (self.family, opt) {
            (FamilyKind::Neural, OptimizerKind::Adam) => {}
            (FamilyKind::Neural, _) => return bad(format!("neural family requires adam, got {opt}")),
            (_, OptimizerKind::Adam) => return bad("adam is only used for the neural family".into()),
            _ => {}
        }
        if opt == OptimizerKind::EntropicMirror {
            match self.l1_radius {
                Some(r) if r > 0.0 && r.is_finite() => {}
                _ => return bad("entropic-mirror requires a positive l1_radius".into()),
            }
        }
        Ok(())
    }

    /// Initial (untrained) local energy of spin `u`.
    pub fn initial_block(&self, u: usize, n: usize, q: usize) -> Result<SpinEnergy> {
        let family = match self.family {
            FamilyKind::Poly => Family::Poly(PolyParams::new(u, n, q, self.max_order, None)?),
            FamilyKind::Symmetric => Family::Symmetric(SymParams::new(u, n, q)?),
            FamilyKind::Neural => {
                let enc = self.encoding.unwrap_or(InputEncoding::default_for(q));
                let seed = self.seed ^ (u as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                Family::Neural(NeuralParams::new(u, n, q, self.depth, self.width, enc, seed)?)
            }
        };
        if self.spin_flip {
            SpinEnergy::symmetrized(family)
        } else {
            Ok(SpinEnergy::new(family))
        }
    }
}

/// Outcome of one spin's fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinReport {
    pub spin: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub epochs: usize,
    pub wall_time_s: f64,
    /// Number of clipped exponents in the final loss evaluation.
    pub clipped: usize,
    pub optimizer: OptimizerKind,
    pub converged: bool,
}

impl SpinReport {
    /// Same report with the wall time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        SpinReport { wall_time_s: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub spins: Vec<SpinReport>,
    pub config: FitConfig,
    pub symmetry: Symmetry,
}

impl FitReport {
    /// One JSON object per fitted spin.
    pub fn to_json_lines(&self) -> String {
        self.spins
            .iter()
            .map(|s| serde_json::to_string(s).expect("reports serialize") + "\n")
            .collect()
    }
}

/// Rows with weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedData {
    pub n: usize,
    pub q: usize,
    pub rows: Vec<u8>,
    pub weights: Vec<f64>,
}

impl WeightedData {
    /// Distinct rows weighted by their empirical frequency, in lexicographic order.
    pub fn from_samples(samples: &SampleSet) -> Result<Self> {
        if samples.m() == 0 {
            return Err(Error::InvalidParameter("empty sample set".into()));
        }
        let mut counts: HashMap<&[u8], usize> = HashMap::new();
        for r in samples.rows() {
            *counts.entry(r).or_insert(0) += 1;
        }
        let mut unique: Vec<(&[u8], usize)> = counts.into_iter().collect();
        unique.sort_unstable();
        let m = samples.m() as f64;
        Ok(WeightedData {
            n: samples.n,
            q: samples.q,
            rows: unique.iter().flat_map(|(r, _)| r.iter().copied()).collect(),
            weights: unique.iter().map(|&(_, c)| c as f64 / m).collect(),
        })
    }

    /// Every row kept, each with weight `1/m`.
    pub fn from_samples_raw(samples: &SampleSet) -> Result<Self> {
        if samples.m() == 0 {
            return Err(Error::InvalidParameter("empty sample set".into()));
        }
        Ok(WeightedData {
            n: samples.n,
            q: samples.q,
            rows: samples.data.clone(),
            weights: vec![1.0 / samples.m() as f64; samples.m()],
        })
    }

    /// Positive-probability entries of an exact table.
    pub fn from_table(table: &ProbTable) -> Self {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for (i, &p) in table.probs.iter().enumerate() {
            if p > 0.0 {
                rows.extend(table.config_of(i));
                weights.push(p);
            }
        }
        WeightedData { n: table.n, q: table.q, rows, weights }
    }

    /// Every row seen from every spin: the row rotated so that spin `u`
    /// sits at position 0, each view carrying `1/n` of the row's weight.
    /// With `merge`, identical views are combined.
    pub fn rotated_views(&self, merge: bool) -> WeightedData {
        let n = self.n;
        let mut rows = Vec::with_capacity(self.rows.len() * n);
        let mut weights = Vec::with_capacity(self.len() * n);
        for r in 0..self.len() {
            let row = self.row(r);
            for u in 0..n {
                rows.extend((0..n).map(|k| row[(k + u) % n]));
                weights.push(self.weights[r] / n as f64);
            }
        }
        if !merge {
            return WeightedData { n, q: self.q, rows, weights };
        }
        let mut merged: HashMap<&[u8], f64> = HashMap::new();
        for (row, w) in rows.chunks_exact(n).zip(&weights) {
            *merged.entry(row).or_insert(0.0) += w;
        }
        let mut unique: Vec<(&[u8], f64)> = merged.into_iter().collect();
        unique.sort_unstable_by(|a, b| a.0.cmp(b.0));
        WeightedData {
            n,
            q: self.q,
            rows: unique.iter().flat_map(|(r, _)| r.iter().copied()).collect(),
            weights: unique.iter().map(|&(_, w)| w).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.rows[r * self.n..(r + 1) * self.n]
    }
}

/// Data a fit runs on.
#[derive(Clone, Copy, Debug)]
pub enum FitData<'a> {
    Samples(&'a SampleSet),
    Exact(&'a ProbTable),
}

impl FitData<'_> {
    pub fn n(&self) -> usize {
        match self {
            FitData::Samples(s) => s.n,
            FitData::Exact(t) => t.n,
        }
    }

    pub fn q(&self) -> usize {
        match self {
            FitData::Samples(s) => s.q,
            FitData::Exact(t) => t.q,
        }
    }

    fn weighted(&self, raw: bool) -> Result<WeightedData> {
        match self {
            FitData::Samples(s) if raw => WeightedData::from_samples_raw(s),
            FitData::Samples(s) => WeightedData::from_samples(s),
            FitData::Exact(t) => Ok(WeightedData::from_table(t)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub clipped: usize,
}

/// Weighted IS loss and gradient of `energy` (for its own spin).
pub fn is_loss(energy: &dyn LocalEnergyFn, data: &WeightedData) -> LossEval {
    let q = energy.q();
    let u = energy.spin();
    let total: f64 = data.weights.iter().sum();
    let mut loss = 0.0;
    let mut grad = vec![0.0; energy.num_params()];
    let mut clipped = 0;
    let mut f = vec![0.0; q];
    let mut up = vec![0.0; q];
    for (r, &w) in data.weights.iter().enumerate() {
        let row = data.row(r);
        energy.value_into(row, &mut f);
        let s = row[u] as usize;
        let e = f[s] - f.iter().sum::<f64>() / q as f64;
        let ec = e.clamp(-EXP_CLIP, EXP_CLIP);
        let term = w * (-ec).exp();
        loss += term;
        if ec != e {
            clipped += 1;
            continue;
        }
        for (a, v) in up.iter_mut().enumerate() {
            *v = -term * centered_delta(a, s, q);
        }
        energy.backward(row, &up, &mut grad);
    }
    grad.iter_mut().for_each(|g| *g /= total);
    LossEval { loss: loss / total, grad, clipped }
}

fn check_data(energy: &dyn LocalEnergyFn, n: usize, q: usize) -> Result<()> {
    if energy.n() != n || energy.q() != q {
        return Err(Error::Spec(format!(
            "local energy expects n={}, q={}, data has n={n}, q={q}",
            energy.n(),
            energy.q()
        )));
    }
    Ok(())
}

/// Empirical IS loss over a sample set.
pub fn is_loss_empirical(energy: &dyn LocalEnergyFn, samples: &SampleSet) -> Result<LossEval> {
    check_data(energy, samples.n, samples.q)?;
    Ok(is_loss(energy, &WeightedData::from_samples(samples)?))
}

/// IS loss in the infinite-sample limit, an expectation over `table`.
pub fn is_loss_exact(energy: &dyn LocalEnergyFn, table: &ProbTable) -> Result<LossEval> {
    check_data(energy, table.n, table.q)?;
    Ok(is_loss(energy, &WeightedData::from_table(table)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(eval: &LossEval, spin: usize, epoch: usize) -> Result<()> {
    if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Optimization(format!(
            "spin {spin}: loss diverged at epoch {epoch} (loss = {}, clipped = {})",
            eval.loss, eval.clipped
        )));
    }
    Ok(())
}

struct Outcome {
    loss: f64,
    grad_norm: f64,
    epochs: usize,
    clipped: usize,
    converged: bool,
}

/// Armijo backtracking gradient descent with Barzilai-Borwein trial steps.
fn gd_backtracking(energy: &mut SpinEnergy, data: &WeightedData, cfg: &FitConfig) -> Result<Outcome> {
    const ARMIJO: f64 = 1e-4;
    let spin = energy.spin();
    energy.project_gauge();
    let mut cur = is_loss(energy, data);
    check_finite(&cur, spin, 0)?;
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut epochs = 0;
    let mut converged = false;
    while epochs < cfg.max_epochs {
        let gnorm = norm(&cur.grad);
        if gnorm < cfg.tol {
            converged = true;
            break;
        }
        epochs += 1;
        let theta = energy.params().to_vec();
        if let Some((p_theta, p_grad)) = &prev {
            let s: Vec<f64> = theta.iter().zip(p_theta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = cur.grad.iter().zip(p_grad).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 0.0 {
                step = dot(&s, &s) / sy;
            }
        }
        let noise = 8.0 * f64::EPSILON * cur.loss.abs();
        let accepted = loop {
            for ((p, t), g) in energy.params_mut().iter_mut().zip(&theta).zip(&cur.grad) {
                *p = t - step * g;
            }
            energy.project_gauge();
            let trial = is_loss(energy, data);
            if trial.loss.is_finite() && trial.loss <= cur.loss - ARMIJO * step * gnorm * gnorm + noise {
                check_finite(&trial, spin, epochs)?;
                break Some(trial);
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        match accepted {
            Some(trial) => {
                prev = Some((theta, std::mem::replace(&mut cur, trial).grad));
            }
            None => {
                // no descent possible at machine precision: keep the last iterate
                energy.params_mut().copy_from_slice(&theta);
                break;
            }
        }
    }
    Ok(Outcome { loss: cur.loss, grad_norm: norm(&cur.grad), epochs, clipped: cur.clipped, converged })
}

/// Entropic mirror descent on the l1 ball of radius `lambda`, written as the
/// simplex over `(w+, w-, slack)` with `theta = lambda (w+ - w-)`.
fn entropic_mirror(energy: &mut SpinEnergy, data: &WeightedData, cfg: &FitConfig, lambda: f64) -> Result<Outcome> {
    let spin = energy.spin();
    let p = energy.num_params();
    let dim = 2 * p + 1;
    let mut x = vec![1.0 / dim as f64; dim];
    let to_theta = |x: &[f64], out: &mut [f64]| {
        for i in 0..p {
            out[i] = lambda * (x[i] - x[p + i]);
        }
    };
    to_theta(&x, energy.params_mut());
    let mut cur = is_loss(energy, data);
    check_finite(&cur, spin, 0)?;
    let mut eta = 1.0;
    let mut epochs = 0;
    let mut converged = false;
    let mut gx = vec![0.0; dim];
    while epochs < cfg.max_epochs {
        for i in 0..p {
            gx[i] = lambda * cur.grad[i];
            gx[p + i] = -lambda * cur.grad[i];
        }
        gx[2 * p] = 0.0;
        // Frank-Wolfe gap: zero exactly at the constrained optimum
        let gmin = gx.iter().cloned().fold(f64::INFINITY, f64::min);
        let gap = dot(&gx, &x) - gmin;
        if gap < cfg.tol || norm(&cur.grad) < cfg.tol {
            converged = true;
            break;
        }
        epochs += 1;
        let noise = 8.0 * f64::EPSILON * cur.loss.abs();
        let mut accepted = None;
        while eta > 1e-20 {
            let logits: Vec<f64> = x.iter().zip(&gx).map(|(xi, g)| xi.ln() - eta * (g - gmin)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut trial_x: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = trial_x.iter().sum();
            trial_x.iter_mut().for_each(|v| *v = (*v / z).max(1e-300));
            to_theta(&trial_x, energy.params_mut());
            let trial = is_loss(energy, data);
            let lin: f64 = gx.iter().zip(trial_x.iter().zip(&x)).map(|(g, (a, b))| g * (a - b)).sum();
            let kl: f64 = trial_x.iter().zip(&x).map(|(a, b)| a * (a / b).ln()).sum();
            if trial.loss.is_finite() && trial.loss <= cur.loss + lin + kl / eta + noise {
                check_finite(&trial, spin, epochs)?;
                accepted = Some((trial_x, trial));
                break;
            }
            eta *= 0.5;
        }
        match accepted {
            Some((nx, trial)) => {
                x = nx;
                cur = trial;
                eta *= 2.0;
            }
            None => {
                to_theta(&x, energy.params_mut());
                break;
            }
        }
    }
    energy.project_gauge();
    let fin = is_loss(energy, data);
    Ok(Outcome { loss: fin.loss, grad_norm: norm(&fin.grad), epochs, clipped: fin.clipped, converged })
}

/// Encoded inputs of a network for every data row, column-major.
fn encode_all(net: &NeuralParams, data: &WeightedData, flip: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.input_dim() * data.len());
    let mut buf = Vec::with_capacity(net.input_dim());
    let mut row = vec![0u8; data.n];
    for r in 0..data.len() {
        row.copy_from_slice(data.row(r));
        if flip {
            row.iter_mut().for_each(|s| *s = 1 - *s);
        }
        net.encode_into(&row, &mut buf);
        out.extend_from_slice(&buf);
    }
    out
}

fn gather(all: &[f64], dim: usize, idx: &[usize]) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(dim * idx.len());
    for &r in idx {
        cols.extend_from_slice(&all[r * dim..(r + 1) * dim]);
    }
    DMatrix::from_column_slice(dim, idx.len(), &cols)
}

/// Loss over rows `idx` (weights renormalized within the batch), with the
/// gradient accumulated into `grad` when given.
fn net_batch_loss(
    net: &NeuralParams,
    flip: bool,
    data: &WeightedData,
    x: &[f64],
    xf: &[f64],
    idx: &[usize],
    grad: Option<&mut [f64]>,
) -> (f64, usize) {
    let q = net.q();
    let dim = net.input_dim();
    let u = net.spin();
    let cache = net.forward_batch(gather(x, dim, idx));
    let cache_f = flip.then(|| net.forward_batch(gather(xf, dim, idx)));
    let total: f64 = idx.iter().map(|&r| data.weights[r]).sum();
    let mut up = DMatrix::zeros(q, idx.len());
    let mut loss = 0.0;
    let mut clipped = 0;
    let mut f = vec![0.0; q];
    for (k, &r) in idx.iter().enumerate() {
        for a in 0..q {
            f[a] = cache.output[(a, k)];
            if let Some(cf) = &cache_f {
                f[a] += cf.output[(1 - a, k)];
            }
        }
        let s = data.row(r)[u] as usize;
        let e = f[s] - f.iter().sum::<f64>() / q as f64;
        let ec = e.clamp(-EXP_CLIP, EXP_CLIP);
        let term = data.weights[r] / total * (-ec).exp();
        loss += term;
        if ec != e {
            clipped += 1;
            continue;
        }
        for a in 0..q {
            up[(a, k)] = -term * centered_delta(a, s, q);
        }
    }
    if let Some(grad) = grad {
        if let Some(cf) = &cache_f {
            let mut swapped = up.clone();
            swapped.swap_rows(0, 1);
            net.backward_batch(cf, swapped, grad);
        }
        net.backward_batch(&cache, up, grad);
    }
    (loss, clipped)
}

/// Weighted loss (and gradient) over `idx`, evaluated in fixed-size chunks.
fn net_loss(
    net: &NeuralParams,
    flip: bool,
    data: &WeightedData,
    x: &[f64],
    xf: &[f64],
    idx: &[usize],
    mut grad: Option<&mut [f64]>,
) -> (f64, usize) {
    let total: f64 = idx.iter().map(|&r| data.weights[r]).sum();
    let mut loss = 0.0;
    let mut clipped = 0;
    let mut g = vec![0.0; if grad.is_some() { net.num_params() } else { 0 }];
    for chunk in idx.chunks(4096) {
        g.iter_mut().for_each(|v| *v = 0.0);
        let (l, c) = net_batch_loss(net, flip, data, x, xf, chunk, grad.is_some().then_some(&mut g[..]));
        let w: f64 = chunk.iter().map(|&r| data.weights[r]).sum::<f64>() / total;
        loss += l * w;
        clipped += c;
        if let Some(acc) = grad.as_deref_mut() {
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b * w);
        }
    }
    (loss, clipped)
}

/// Minibatch adam with inverse-time decay and early stopping. With a
/// validation fraction, a seeded share of the rows is held out, early
/// stopping watches the held-out loss and the best parameters are restored.
fn adam(energy: &mut SpinEnergy, data: &WeightedData, cfg: &FitConfig) -> Result<Outcome> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let flip = energy.spin_flip();
    let Family::Neural(net) = &mut energy.family else {
        return Err(Error::Spec("adam fits only neural local energies".into()));
    };
    let spin = net.spin();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (spin as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut train: Vec<usize> = (0..data.len()).collect();
    let mut valid = Vec::new();
    if cfg.validation_fraction > 0.0 {
        train.shuffle(&mut rng);
        let held = ((data.len() as f64 * cfg.validation_fraction).round() as usize).min(data.len().saturating_sub(1));
        valid = train.split_off(data.len() - held);
    }
    if cfg.batch_size > train.len() {
        return Err(Error::InvalidParameter(format!(
            "batch_size {} exceeds the {} available training rows",
            cfg.batch_size,
            train.len()
        )));
    }
    let x = encode_all(net, data, false);
    let xf = if flip { encode_all(net, data, true) } else { Vec::new() };
    let p = net.num_params();
    let (mut m1, mut m2) = (vec![0.0; p], vec![0.0; p]);
    let mut t = 0i32;
    let mut best = f64::INFINITY;
    let mut best_params = net.params().to_vec();
    let mut stale = 0;
    let mut epochs = 0;
    let mut converged = false;
    let mut grad = vec![0.0; p];
    while epochs < cfg.max_epochs {
        let rate = cfg.learning_rate / (1.0 + cfg.lr_decay * epochs as f64);
        epochs += 1;
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let (loss, _) = net_batch_loss(net, flip, data, &x, &xf, batch, Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Optimization(format!("spin {spin}: loss diverged at epoch {epochs} (loss = {loss})")));
            }
            let wb: f64 = batch.iter().map(|&r| data.weights[r]).sum();
            epoch_loss += loss * wb;
            seen += wb;
            t += 1;
            let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
            for (((w, g), a), b) in net.params_mut().iter_mut().zip(&grad).zip(&mut m1).zip(&mut m2) {
                *a = B1 * *a + (1.0 - B1) * g;
                *b = B2 * *b + (1.0 - B2) * g * g;
                *w -= rate * (*a / c1) / ((*b / c2).sqrt() + EPS);
            }
        }
        let watched = if valid.is_empty() {
            epoch_loss / seen
        } else {
            net_loss(net, flip, data, &x, &xf, &valid, None).0
        };
        if !watched.is_finite() {
            return Err(Error::Optimization(format!("spin {spin}: loss diverged at epoch {epochs} (loss = {watched})")));
        }
        if watched < best - cfg.early_stop_delta {
            best = watched;
            best_params.copy_from_slice(net.params());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                converged = true;
                break;
            }
        }
    }
    if !valid.is_empty() {
        net.params_mut().copy_from_slice(&best_params);
    }
    grad.iter_mut().for_each(|g| *g = 0.0);
    let (loss, clipped) = net_loss(net, flip, data, &x, &xf, &train, Some(&mut grad));
    Ok(Outcome { loss, grad_norm: norm(&grad), epochs, clipped, converged })
}

/// Fits one local energy, starting from `init`, on the data.
pub fn fit_spin(init: SpinEnergy, data: FitData<'_>, cfg: &FitConfig) -> Result<(SpinEnergy, SpinReport)> {
    cfg.validate()?;
    check_data(&init, data.n(), data.q())?;
    let opt = cfg.optimizer();
    let weighted = data.weighted(opt == OptimizerKind::Adam)?;
    fit_weighted(init, &weighted, cfg)
}

fn fit_weighted(mut energy: SpinEnergy, data: &WeightedData, cfg: &FitConfig) -> Result<(SpinEnergy, SpinReport)> {
    let start = Instant::now();
    let opt = cfg.optimizer();
    let out = match opt {
        OptimizerKind::GdBacktracking => gd_backtracking(&mut energy, data, cfg)?,
        OptimizerKind::EntropicMirror => {
            let lambda = cfg.l1_radius.expect("validated");
            entropic_mirror(&mut energy, data, cfg, lambda)?
        }
        OptimizerKind::Adam => adam(&mut energy, data, cfg)?,
    };
    let report = SpinReport {
        spin: energy.spin(),
        loss: out.loss,
        grad_norm: out.grad_norm,
        epochs: out.epochs,
        wall_time_s: start.elapsed().as_secs_f64(),
        clipped: out.clipped,
        optimizer: opt,
        converged: out.converged,
    };
    Ok((energy, report))
}

/// Fits a whole model. With a shared symmetry a single block is fitted (as
/// spin 0) and reused for every spin.
pub fn fit_model(data: FitData<'_>, cfg: &FitConfig, symmetry: Symmetry) -> Result<(EnergyModel, FitReport)> {
    cfg.validate()?;
    let (n, q) = (data.n(), data.q());
    if symmetry == Symmetry::Permutation && cfg.family != FamilyKind::Symmetric {
        return Err(Error::Spec("permutation symmetry requires the symmetric family".into()));
    }
    let raw = cfg.optimizer() == OptimizerKind::Adam;
    let mut weighted = data.weighted(raw)?;
    if symmetry != Symmetry::None && cfg.pool_views {
        weighted = weighted.rotated_views(!raw);
    }
    let spins: Vec<usize> = if symmetry == Symmetry::None { (0..n).collect() } else { vec![0] };
    let fitted = spins
        .par_iter()
        .map(|&u| fit_weighted(cfg.initial_block(u, n, q)?, &weighted, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (blocks, reports): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    let model = EnergyModel::new(n, q, symmetry, blocks)?;
    Ok((model, FitReport { spins: reports, config: cfg.clone(), symmetry }))
}
