//! Clamped free energies and their parameter gradients.
//!
//! On a support `S` of hidden configurations the free energy is
//!
//! ```text
//! F = sum_k p_k E_k + (1/beta) sum_k p_k ln p_k = -(1/beta) ln sum_{h in S} exp(-beta E(v, h))
//! ```
//!
//! with `p` the Boltzmann distribution restricted to `S` (conditional on the
//! clamped visible units). Holding `S` fixed, `dF/dtheta = <dE/dtheta>_p`.
//!
//! For the full support the sums are computed without materialising all
//! `2^H` configurations: hidden layers alternate parity, units of one parity
//! are conditionally independent given the other, so the smaller parity
//! class is enumerated and the other is summed out in closed form.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::energy_model::{
    clamp, clamp_actions, mean_hamiltonian, ClampedHamiltonian, DbmTopology, DbmWeights,
    UnitAssignment, UnitRole,
};
use crate::sampler::{
    log_sum_exp, probs_from_energies, sample_energies, sampler_for, Backend, SampleSet,
    SamplerConfig,
};
use crate::{Error, Result};

/// Entropy terms with `p` below this are dropped (`0 ln 0 = 0`).
const PROB_FLOOR: f64 = 1e-300;

/// Largest parity class the closed-form full-support route will enumerate.
const MAX_ENUMERATED_CLASS: usize = 30;

/// `F = sum p E + (1/beta) sum p ln p` over the sampled configs.
pub fn truncated_free_energy(ch: &ClampedHamiltonian, s: &SampleSet) -> Result<f64> {
    let energies = sample_energies(ch, s)?;
    let probs = probs_from_energies(&energies, ch.beta());
    let mut mean_energy = 0.0;
    let mut neg_entropy = 0.0;
    for (p, e) in probs.iter().zip(&energies) {
        if *p < PROB_FLOOR {
            continue;
        }
        mean_energy += p * e;
        neg_entropy += p * p.ln();
    }
    Ok(mean_energy + neg_entropy / ch.beta())
}

/// `-(1/beta) ln sum exp(-beta E)` over the sampled configs.
pub fn truncated_free_energy_lse(ch: &ClampedHamiltonian, s: &SampleSet) -> Result<f64> {
    let beta = ch.beta();
    let logw: Vec<f64> = sample_energies(ch, s)?.iter().map(|e| -beta * e).collect();
    Ok(-log_sum_exp(&logw) / beta)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `(softplus(z), sigmoid(z))` from a single exponential.
fn softplus_sigmoid(z: f64) -> (f64, f64) {
    let t = (-z.abs()).exp();
    let sp = z.max(0.0) + t.ln_1p();
    let sg = if z >= 0.0 {
        1.0 / (1.0 + t)
    } else {
        t / (1.0 + t)
    };
    (sp, sg)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Hidden units split by layer parity; `enumerated` is the smaller class.
struct ParitySplit {
    enumerated: Vec<usize>,
    summed: Vec<usize>,
}

impl ParitySplit {
    fn new(ch: &ClampedHamiltonian) -> Result<Self> {
        let (mut even, mut odd) = (Vec::new(), Vec::new());
        for k in 0..ch.layers().len() {
            let class = if k % 2 == 0 { &mut even } else { &mut odd };
            class.extend(ch.layer_start(k)..ch.layer_start(k + 1));
        }
        let (enumerated, summed) = if odd.len() < even.len() {
            (odd, even)
        } else {
            (even, odd)
        };
        if enumerated.len() > MAX_ENUMERATED_CLASS {
            return Err(Error::SupportCapExceeded {
                n_hidden: ch.n_hidden(),
                cap: 2 * MAX_ENUMERATED_CLASS,
            });
        }
        Ok(ParitySplit { enumerated, summed })
    }

    fn set(&self, code: u64, h: &mut [u8]) {
        for (bit, &unit) in self.enumerated.iter().enumerate() {
            h[unit] = ((code >> bit) & 1) as u8;
        }
    }

    /// Log of the summed-out weight for the enumerated units currently in `h`.
    fn log_weight(&self, ch: &ClampedHamiltonian, h: &[u8]) -> f64 {
        let beta = ch.beta();
        let mut base = ch.constant();
        for &e in &self.enumerated {
            if h[e] == 1 {
                base += ch.eff_bias()[e];
            }
        }
        let mut lw = -beta * base;
        for &m in &self.summed {
            lw += softplus(-beta * ch.local_field(h, m));
        }
        lw
    }
}

/// Free energy over the full hidden space, `-(1/beta) ln Z(v)`.
pub fn exact_free_energy(ch: &ClampedHamiltonian) -> Result<f64> {
    let split = ParitySplit::new(ch)?;
    let mut h = vec![0u8; ch.n_hidden()];
    let logw: Vec<f64> = (0..1u64 << split.enumerated.len())
        .map(|code| {
            split.set(code, &mut h);
            split.log_weight(ch, &h)
        })
        .collect();
    Ok(-log_sum_exp(&logw) / ch.beta())
}

/// First and second moments of the hidden units that the gradient needs:
/// `<h_k>` per unit and `<h_a h_b>` per hidden-hidden edge (block layout of
/// [`ClampedHamiltonian::inter_layer`]).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenMoments {
    pub mean: Vec<f64>,
    pub pair: Vec<Vec<f64>>,
}

impl HiddenMoments {
    fn zeros(ch: &ClampedHamiltonian) -> Self {
        HiddenMoments {
            mean: vec![0.0; ch.n_hidden()],
            pair: (0..ch.layers().len() - 1)
                .map(|k| vec![0.0; ch.inter_layer(k).len()])
                .collect(),
        }
    }
}

/// Moments under the truncated distribution on `s`.
pub fn support_moments(ch: &ClampedHamiltonian, s: &SampleSet) -> Result<HiddenMoments> {
    let energies = sample_energies(ch, s)?;
    let probs = probs_from_energies(&energies, ch.beta());
    let mut m = HiddenMoments::zeros(ch);
    let layers = ch.layers();
    for (config, p) in s.configs().iter().zip(probs) {
        for (acc, &x) in m.mean.iter_mut().zip(config) {
            if x == 1 {
                *acc += p;
            }
        }
        for (k, block) in m.pair.iter_mut().enumerate() {
            let (a, b, next) = (ch.layer_start(k), ch.layer_start(k + 1), layers[k + 1]);
            for i in 0..layers[k] {
                if config[a + i] == 0 {
                    continue;
                }
                for j in 0..next {
                    if config[b + j] == 1 {
                        block[i * next + j] += p;
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Moments under the exact (full-support) distribution.
pub fn exact_moments(ch: &ClampedHamiltonian) -> Result<HiddenMoments> {
    let split = ParitySplit::new(ch)?;
    let n_codes = 1u64 << split.enumerated.len();
    let mut h = vec![0u8; ch.n_hidden()];
    let logw: Vec<f64> = (0..n_codes)
        .map(|code| {
            split.set(code, &mut h);
            split.log_weight(ch, &h)
        })
        .collect();
    let lz = log_sum_exp(&logw);
    let beta = ch.beta();
    let layers = ch.layers();
    let mut m = HiddenMoments::zeros(ch);
    // conditional <h_m> for summed units, indexed by hidden unit
    let mut cond = vec![0.0; ch.n_hidden()];
    for (code, lw) in (0..n_codes).zip(&logw) {
        let q = (lw - lz).exp();
        if q == 0.0 {
            continue;
        }
        split.set(code, &mut h);
        for &e in &split.enumerated {
            cond[e] = h[e] as f64;
        }
        for &s in &split.summed {
            cond[s] = sigmoid(-beta * ch.local_field(&h, s));
        }
        for (acc, c) in m.mean.iter_mut().zip(&cond) {
            *acc += q * c;
        }
        // adjacent layers always straddle the two classes, so the pair
        // expectation factorises given the enumerated units
        for (k, block) in m.pair.iter_mut().enumerate() {
            let (a, b, next) = (ch.layer_start(k), ch.layer_start(k + 1), layers[k + 1]);
            for i in 0..layers[k] {
                let ci = cond[a + i];
                if ci == 0.0 {
                    continue;
                }
                for j in 0..next {
                    block[i * next + j] += q * ci * cond[b + j];
                }
            }
        }
    }
    Ok(m)
}

/// Largest parity class the shared-family enumeration tabulates.
const MAX_FAMILY_CLASS: usize = 16;

/// Exact enumeration shared by Hamiltonians with identical layers,
/// couplings and beta that differ only in their constants and in the
/// effective biases of units of one parity class (e.g. the per-action clamps
/// of a policy head, which differ on the last hidden layer). That class is
/// enumerated; the other is summed out once per configuration for all
/// members together.
#[derive(Debug)]
pub(crate) struct FamilyTable {
    n_codes: usize,
    n_hidden: usize,
    beta: f64,
    /// `logw[i][code]`, unnormalised log weight of member `i`.
    logw: Vec<Vec<f64>>,
    lz: Vec<f64>,
    /// `cond[code * n_hidden + u]`: `E[h_u | enumerated units]`.
    cond: Vec<f64>,
}

impl FamilyTable {
    /// `None` when the members do not fit the shared structure.
    pub(crate) fn build(chs: &[ClampedHamiltonian]) -> Option<Self> {
        let first = chs.first()?;
        let n_layers = first.layers().len();
        for ch in &chs[1..] {
            if ch.layers() != first.layers() || ch.beta() != first.beta() {
                return None;
            }
            if (0..n_layers - 1).any(|k| ch.inter_layer(k) != first.inter_layer(k)) {
                return None;
            }
        }
        let n_hidden = first.n_hidden();
        let parity_of = |u: usize| {
            let mut k = 0;
            while first.layer_start(k + 1) <= u {
                k += 1;
            }
            k % 2
        };
        let varying: Vec<usize> = (0..n_hidden)
            .filter(|&u| chs.iter().any(|c| c.eff_bias()[u] != first.eff_bias()[u]))
            .collect();
        let class =
            |p: usize| -> Vec<usize> { (0..n_hidden).filter(|&u| parity_of(u) == p).collect() };
        let (even, odd) = (class(0), class(1));
        let fits =
            |c: &Vec<usize>| varying.iter().all(|u| c.contains(u)) && c.len() <= MAX_FAMILY_CLASS;
        let enumerated = match (fits(&even), fits(&odd)) {
            (true, true) if odd.len() < even.len() => odd,
            (true, _) => even,
            (false, true) => odd,
            (false, false) => return None,
        };
        let summed: Vec<usize> = (0..n_hidden).filter(|u| !enumerated.contains(u)).collect();
        let beta = first.beta();
        let n_codes = 1usize << enumerated.len();
        let mut logw = vec![vec![0.0; n_codes]; chs.len()];
        let mut cond = vec![0.0; n_codes * n_hidden];
        let mut h = vec![0u8; n_hidden];
        for code in 0..n_codes {
            for (bit, &u) in enumerated.iter().enumerate() {
                h[u] = ((code >> bit) & 1) as u8;
            }
            let row = &mut cond[code * n_hidden..(code + 1) * n_hidden];
            let mut shared = 0.0;
            for &m in &summed {
                let (sp, sg) = softplus_sigmoid(-beta * first.local_field(&h, m));
                shared += sp;
                row[m] = sg;
            }
            let mut base = 0.0;
            for &e in &enumerated {
                row[e] = h[e] as f64;
                if h[e] == 1 {
                    base += first.eff_bias()[e];
                }
            }
            for (i, ch) in chs.iter().enumerate() {
                let mut e_i = base + ch.constant();
                for &u in &varying {
                    if h[u] == 1 {
                        e_i += ch.eff_bias()[u] - first.eff_bias()[u];
                    }
                }
                logw[i][code] = -beta * e_i + shared;
            }
        }
        let lz = logw.iter().map(|l| log_sum_exp(l)).collect();
        Some(FamilyTable {
            n_codes,
            n_hidden,
            beta,
            logw,
            lz,
            cond,
        })
    }

    pub(crate) fn free_energies(&self) -> Vec<f64> {
        self.lz.iter().map(|l| -l / self.beta).collect()
    }

    fn weights(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let lz = self.lz[i];
        self.logw[i].iter().map(move |l| (l - lz).exp())
    }

    /// `<h_u>` for every member.
    pub(crate) fn member_means(&self) -> Vec<Vec<f64>> {
        (0..self.logw.len())
            .map(|i| {
                let mut mean = vec![0.0; self.n_hidden];
                for (code, q) in self.weights(i).enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    let row = &self.cond[code * self.n_hidden..(code + 1) * self.n_hidden];
                    for (m, c) in mean.iter_mut().zip(row) {
                        *m += q * c;
                    }
                }
                mean
            })
            .collect()
    }

    /// `sum_i coeffs[i] <h_a h_b>_i` per hidden edge, block layout.
    pub(crate) fn weighted_pairs(&self, ch: &ClampedHamiltonian, coeffs: &[f64]) -> Vec<Vec<f64>> {
        let mut w = vec![0.0; self.n_codes];
        for (i, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (acc, q) in w.iter_mut().zip(self.weights(i)) {
                *acc += c * q;
            }
        }
        let layers = ch.layers();
        let mut pair: Vec<Vec<f64>> = (0..layers.len() - 1)
            .map(|k| vec![0.0; ch.inter_layer(k).len()])
            .collect();
        for (code, &wc) in w.iter().enumerate() {
            if wc == 0.0 {
                continue;
            }
            let row = &self.cond[code * self.n_hidden..(code + 1) * self.n_hidden];
            for (k, block) in pair.iter_mut().enumerate() {
                let (a, b, next) = (ch.layer_start(k), ch.layer_start(k + 1), layers[k + 1]);
                for i in 0..layers[k] {
                    let ci = wc * row[a + i];
                    if ci == 0.0 {
                        continue;
                    }
                    for j in 0..next {
                        block[i * next + j] += ci * row[b + j];
                    }
                }
            }
        }
        pair
    }
}

/// Exact free energies of several Hamiltonians, shared enumeration when
/// their structure allows it.
pub fn exact_free_energies(chs: &[ClampedHamiltonian]) -> Result<Vec<f64>> {
    match FamilyTable::build(chs) {
        Some(t) => Ok(t.free_energies()),
        None => chs.iter().map(exact_free_energy).collect(),
    }
}

/// `out += sum_i coeffs[i] * dF_i/dtheta` in [`DbmWeights::flatten`] layout,
/// from per-member hidden means and coefficient-weighted pair moments.
/// `visibles[i]` is member `i`'s clamped visible vector.
pub fn accumulate_weighted_gradient(
    topo: &DbmTopology,
    visibles: &[&[u8]],
    means: &[Vec<f64>],
    weighted_pairs: &[Vec<f64>],
    coeffs: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let n = coeffs.len();
    if visibles.len() != n || means.len() != n {
        return Err(Error::dim(
            "family members",
            n,
            visibles.len().min(means.len()),
        ));
    }
    let n_params = 1 + topo.n_units() + topo.n_edges();
    if out.len() != n_params {
        return Err(Error::dim("gradient buffer", n_params, out.len()));
    }
    for (v, m) in visibles.iter().zip(means) {
        if v.len() != topo.n_visible() {
            return Err(Error::dim(
                "clamped visible units",
                topo.n_visible(),
                v.len(),
            ));
        }
        if m.len() != topo.n_hidden() {
            return Err(Error::dim("hidden moments", topo.n_hidden(), m.len()));
        }
    }
    let (ns, na, nh) = (topo.n_state(), topo.n_action(), topo.n_hidden());
    let layers = topo.hidden_layers();
    // coefficient-weighted hidden means
    let mut wmean = vec![0.0; nh];
    for (c, m) in coeffs.iter().zip(means) {
        if *c != 0.0 {
            for (w, x) in wmean.iter_mut().zip(m) {
                *w += c * x;
            }
        }
    }
    // coefficient-weighted visible values
    let mut wvis = vec![0.0; ns + na];
    for (c, v) in coeffs.iter().zip(visibles) {
        for (w, &x) in wvis.iter_mut().zip(v.iter()) {
            if x == 1 {
                *w += c;
            }
        }
    }
    out[0] += coeffs.iter().sum::<f64>();
    let bias = &mut out[1..1 + topo.n_units()];
    bias[..ns]
        .iter_mut()
        .zip(&wvis[..ns])
        .for_each(|(o, w)| *o += w);
    bias[ns..ns + nh]
        .iter_mut()
        .zip(&wmean)
        .for_each(|(o, w)| *o += w);
    bias[ns + nh..]
        .iter_mut()
        .zip(&wvis[ns..])
        .for_each(|(o, w)| *o += w);
    let edges = &mut out[1 + topo.n_units()..];
    let mut at = 0;
    // state to h_1: sum_i c_i v_i[p] <h>_i
    let h1 = layers[0];
    let same_state = visibles.iter().all(|v| v[..ns] == visibles[0][..ns]);
    for p in 0..ns {
        for j in 0..h1 {
            edges[at + p * h1 + j] += if same_state {
                if visibles[0][p] == 1 {
                    wmean[j]
                } else {
                    0.0
                }
            } else {
                coeffs
                    .iter()
                    .zip(visibles)
                    .zip(means)
                    .filter(|((_, v), _)| v[p] == 1)
                    .map(|((c, _), m)| c * m[j])
                    .sum()
            };
        }
    }
    at += ns * h1;
    for block in weighted_pairs {
        for (o, w) in edges[at..at + block.len()].iter_mut().zip(block) {
            *o += w;
        }
        at += block.len();
    }
    // h_l to actions
    let last = layers.len() - 1;
    let hl_start = nh - layers[last];
    for ((c, v), m) in coeffs.iter().zip(visibles).zip(means) {
        if *c == 0.0 {
            continue;
        }
        for a in 0..na {
            if v[ns + a] == 1 {
                for i in 0..layers[last] {
                    edges[at + i * na + a] += c * m[hl_start + i];
                }
            }
        }
    }
    Ok(())
}

/// Which original units were clamped, and to what.
#[derive(Debug, Clone, Copy)]
pub struct ClampMap<'a> {
    pub topo: &'a DbmTopology,
    /// Visible values in `(state, action)` order.
    pub visible: &'a [u8],
}

/// Gradient of a scalar with respect to every [`DbmWeights`] parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub d_offset: f64,
    pub d_bias: Vec<f64>,
    pub d_coupling: Vec<f64>,
}

impl ParamGradient {
    /// Same layout as [`DbmWeights::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(1 + self.d_bias.len() + self.d_coupling.len());
        flat.push(self.d_offset);
        flat.extend_from_slice(&self.d_bias);
        flat.extend_from_slice(&self.d_coupling);
        flat
    }

    /// `out += scale * self` in flat layout.
    pub fn accumulate_into(&self, scale: f64, out: &mut [f64]) {
        out[0] += scale * self.d_offset;
        let nb = self.d_bias.len();
        for (o, g) in out[1..1 + nb].iter_mut().zip(&self.d_bias) {
            *o += scale * g;
        }
        for (o, g) in out[1 + nb..].iter_mut().zip(&self.d_coupling) {
            *o += scale * g;
        }
    }
}

/// Map hidden moments to `<dE/dtheta>` for every parameter of the full model.
pub fn gradient_from_moments(m: &HiddenMoments, map: ClampMap<'_>) -> Result<ParamGradient> {
    let topo = map.topo;
    if map.visible.len() != topo.n_visible() {
        return Err(Error::dim(
            "clamped visible units",
            topo.n_visible(),
            map.visible.len(),
        ));
    }
    if m.mean.len() != topo.n_hidden() {
        return Err(Error::dim("hidden moments", topo.n_hidden(), m.mean.len()));
    }
    let v = |p: usize| map.visible[p] as f64;
    let d_bias = (0..topo.n_units())
        .map(|u| match topo.role(u) {
            UnitRole::Visible(p) => v(p),
            UnitRole::Hidden(h) => m.mean[h],
        })
        .collect();
    let mut pairs = m.pair.iter().flatten();
    let d_coupling = topo
        .edges()
        .into_iter()
        .map(|(i, j)| match (topo.role(i), topo.role(j)) {
            (UnitRole::Visible(p), UnitRole::Visible(q)) => v(p) * v(q),
            (UnitRole::Visible(p), UnitRole::Hidden(h))
            | (UnitRole::Hidden(h), UnitRole::Visible(p)) => v(p) * m.mean[h],
            (UnitRole::Hidden(_), UnitRole::Hidden(_)) => {
                *pairs.next().expect("pair moments cover hidden edges")
            }
        })
        .collect();
    Ok(ParamGradient {
        d_offset: 1.0,
        d_bias,
        d_coupling,
    })
}

/// `dF/dtheta` with the support held fixed.
pub fn free_energy_gradient(
    ch: &ClampedHamiltonian,
    s: &SampleSet,
    map: ClampMap<'_>,
) -> Result<ParamGradient> {
    gradient_from_moments(&support_moments(ch, s)?, map)
}

pub fn exact_free_energy_gradient(
    ch: &ClampedHamiltonian,
    map: ClampMap<'_>,
) -> Result<ParamGradient> {
    gradient_from_moments(&exact_moments(ch)?, map)
}

/// Support a head evaluates its free energies on.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    /// Every hidden configuration (exact backend).
    Full,
    Sampled(SampleSet),
}

impl Support {
    pub fn free_energy(&self, ch: &ClampedHamiltonian) -> Result<f64> {
        match self {
            Support::Full => exact_free_energy(ch),
            Support::Sampled(s) => truncated_free_energy(ch, s),
        }
    }

    pub fn gradient(&self, ch: &ClampedHamiltonian, map: ClampMap<'_>) -> Result<ParamGradient> {
        match self {
            Support::Full => exact_free_energy_gradient(ch, map),
            Support::Sampled(s) => free_energy_gradient(ch, s, map),
        }
    }
}

/// Softmax of the logits.
pub fn action_distribution(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    let lz = log_sum_exp(logits);
    Ok(logits.iter().map(|l| (l - lz).exp()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    Value,
    Policy { n_actions: usize },
}

/// A DBM used as a value or policy function approximator.
#[derive(Debug)]
pub struct FreeEnergyHead {
    topo: DbmTopology,
    weights: DbmWeights,
    backend: Backend,
    sampler: SamplerConfig,
    kind: HeadKind,
    calls: AtomicU64,
}

impl Clone for FreeEnergyHead {
    fn clone(&self) -> Self {
        FreeEnergyHead {
            topo: self.topo.clone(),
            weights: self.weights.clone(),
            backend: self.backend,
            sampler: self.sampler.clone(),
            kind: self.kind,
            calls: AtomicU64::new(self.sampler_calls()),
        }
    }
}

/// Serializable state of a [`FreeEnergyHead`], including its sampler call
/// counter (which selects the next random stream).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    pub topology: DbmTopology,
    pub weights: DbmWeights,
    pub backend: Backend,
    pub sampler: SamplerConfig,
    pub kind: HeadKind,
    pub sampler_calls: u64,
}

/// Value-head evaluation, kept for the gradient pass.
#[derive(Debug, Clone)]
pub struct ValueEval {
    pub value: f64,
    pub hamiltonian: ClampedHamiltonian,
    pub support: Support,
    family: Option<Arc<FamilyTable>>,
}

/// Policy-head evaluation: per-action Hamiltonians on one shared support.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub logits: Vec<f64>,
    pub free_energies: Vec<f64>,
    pub hamiltonians: Vec<ClampedHamiltonian>,
    pub support: Support,
    family: Option<Arc<FamilyTable>>,
}

impl FreeEnergyHead {
    pub fn new(
        topo: DbmTopology,
        weights: DbmWeights,
        backend: Backend,
        sampler: SamplerConfig,
        kind: HeadKind,
    ) -> Result<Self> {
        weights.check(&topo)?;
        sampler.validate()?;
        match kind {
            HeadKind::Value if topo.n_action() != 0 => {
                return Err(Error::InvalidTopology("a value head has no action units".into()))
            }
            HeadKind::Policy { n_actions } if n_actions == 0 || topo.n_action() != n_actions => {
                return Err(Error::InvalidTopology(format!(
                    "policy head over {n_actions} actions needs exactly that many action units, topology has {}",
                    topo.n_action()
                )))
            }
            _ => {}
        }
        if backend == Backend::Exact && topo.n_hidden() > sampler.exact_cap {
            return Err(Error::SupportCapExceeded {
                n_hidden: topo.n_hidden(),
                cap: sampler.exact_cap,
            });
        }
        Ok(FreeEnergyHead {
            topo,
            weights,
            backend,
            sampler,
            kind,
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_state(state: HeadState) -> Result<Self> {
        let head = Self::new(
            state.topology,
            state.weights,
            state.backend,
            state.sampler,
            state.kind,
        )?;
        head.calls.store(state.sampler_calls, Ordering::SeqCst);
        Ok(head)
    }

    pub fn state(&self) -> HeadState {
        HeadState {
            topology: self.topo.clone(),
            weights: self.weights.clone(),
            backend: self.backend,
            sampler: self.sampler.clone(),
            kind: self.kind,
            sampler_calls: self.sampler_calls(),
        }
    }

    pub fn topology(&self) -> &DbmTopology {
        &self.topo
    }

    pub fn weights(&self) -> &DbmWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DbmWeights {
        &mut self.weights
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn n_state(&self) -> usize {
        self.topo.n_state()
    }

    /// Total sampler invocations so far.
    pub fn sampler_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// One sampler invocation on `ch`; its index picks the random stream.
    pub fn draw_support(&self, ch: &ClampedHamiltonian) -> Result<Support> {
        let stream = self.calls.fetch_add(1, Ordering::SeqCst);
        self.draw_support_at(ch, stream)
    }

    /// Reserve `n` consecutive stream indices and return the first. Lets a
    /// batch of evaluations run in any order with fixed random streams.
    pub fn reserve_streams(&self, n: u64) -> u64 {
        self.calls.fetch_add(n, Ordering::SeqCst)
    }

    /// Sampler invocation on an explicit (previously reserved) stream.
    pub fn draw_support_at(&self, ch: &ClampedHamiltonian, stream: u64) -> Result<Support> {
        match self.backend {
            Backend::Exact => Ok(Support::Full),
            backend => Ok(Support::Sampled(
                sampler_for(backend, &self.sampler).sample(ch, stream)?,
            )),
        }
    }

    fn check_state(&self, state: &[u8]) -> Result<()> {
        if state.len() != self.topo.n_state() {
            return Err(Error::dim("state vector", self.topo.n_state(), state.len()));
        }
        Ok(())
    }

    fn visible(&self, state: &[u8], action: Option<usize>) -> Result<UnitAssignment> {
        let mut v = state.to_vec();
        v.extend((0..self.topo.n_action()).map(|i| (Some(i) == action) as u8));
        UnitAssignment::new(v)
    }

    pub fn value_eval(&self, state: &[u8]) -> Result<ValueEval> {
        let stream = self.reserve_streams(1);
        self.value_eval_at(state, stream)
    }

    pub fn value_eval_at(&self, state: &[u8], stream: u64) -> Result<ValueEval> {
        if self.kind != HeadKind::Value {
            return Err(Error::InvalidParameter(
                "value() called on a policy head".into(),
            ));
        }
        self.check_state(state)?;
        let ch = clamp(&self.topo, &self.weights, &self.visible(state, None)?)?;
        let support = self.draw_support_at(&ch, stream)?;
        self.value_on(ch, support)
    }

    /// Value estimate on a given support, without sampling.
    pub fn value_on(&self, ch: ClampedHamiltonian, support: Support) -> Result<ValueEval> {
        let family = match support {
            Support::Full => FamilyTable::build(std::slice::from_ref(&ch)).map(Arc::new),
            _ => None,
        };
        let value = match &family {
            Some(t) => -t.free_energies()[0],
            None => -support.free_energy(&ch)?,
        };
        Ok(ValueEval {
            value,
            hamiltonian: ch,
            support,
            family,
        })
    }

    /// `V(s) = -F(s)`.
    pub fn value(&self, state: &[u8]) -> Result<f64> {
        Ok(self.value_eval(state)?.value)
    }

    fn action_hamiltonians(&self, state: &[u8]) -> Result<Vec<ClampedHamiltonian>> {
        let n = match self.kind {
            HeadKind::Policy { n_actions } => n_actions,
            HeadKind::Value => {
                return Err(Error::InvalidParameter(
                    "policy_logits() called on a value head".into(),
                ))
            }
        };
        self.check_state(state)?;
        let hams = clamp_actions(&self.topo, &self.weights, state)?;
        debug_assert_eq!(hams.len(), n);
        Ok(hams)
    }

    /// Clamp each action, sample once from the mean Hamiltonian, and score
    /// every action on that shared support.
    pub fn policy_eval(&self, state: &[u8]) -> Result<PolicyEval> {
        let stream = self.reserve_streams(1);
        self.policy_eval_at(state, stream)
    }

    pub fn policy_eval_at(&self, state: &[u8], stream: u64) -> Result<PolicyEval> {
        let hams = self.action_hamiltonians(state)?;
        let support = match self.backend {
            Backend::Exact => self.draw_support_at(&hams[0], stream)?,
            _ => self.draw_support_at(&mean_hamiltonian(&hams)?, stream)?,
        };
        self.score_actions(hams, support)
    }

    /// Policy evaluation on a previously drawn support, without sampling.
    pub fn policy_eval_on(&self, state: &[u8], support: Support) -> Result<PolicyEval> {
        let hams = self.action_hamiltonians(state)?;
        self.score_actions(hams, support)
    }

    /// Value evaluation on a previously drawn support, without sampling.
    pub fn value_eval_on(&self, state: &[u8], support: Support) -> Result<ValueEval> {
        self.check_state(state)?;
        let ch = clamp(&self.topo, &self.weights, &self.visible(state, None)?)?;
        self.value_on(ch, support)
    }

    fn score_actions(&self, hams: Vec<ClampedHamiltonian>, support: Support) -> Result<PolicyEval> {
        let family = match support {
            Support::Full => FamilyTable::build(&hams).map(Arc::new),
            _ => None,
        };
        let free_energies = match &family {
            Some(t) => t.free_energies(),
            None => hams
                .iter()
                .map(|h| support.free_energy(h))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(PolicyEval {
            logits: free_energies.iter().map(|f| -f).collect(),
            free_energies,
            hamiltonians: hams,
            support,
            family,
        })
    }

    /// Logits `-F_i`, one per action.
    pub fn policy_logits(&self, state: &[u8]) -> Result<Vec<f64>> {
        Ok(self.policy_eval(state)?.logits)
    }

    /// `dF/dtheta` for the value evaluation.
    pub fn value_gradient(&self, state: &[u8], eval: &ValueEval) -> Result<ParamGradient> {
        let v = self.visible(state, None)?;
        eval.support.gradient(
            &eval.hamiltonian,
            ClampMap {
                topo: &self.topo,
                visible: v.as_slice(),
            },
        )
    }

    /// `dF_i/dtheta` for every action of a policy evaluation.
    pub fn action_gradients(&self, state: &[u8], eval: &PolicyEval) -> Result<Vec<ParamGradient>> {
        eval.hamiltonians
            .iter()
            .enumerate()
            .map(|(a, ch)| {
                let v = self.visible(state, Some(a))?;
                eval.support.gradient(
                    ch,
                    ClampMap {
                        topo: &self.topo,
                        visible: v.as_slice(),
                    },
                )
            })
            .collect()
    }
}

/// Per-member hidden means and coefficient-weighted pair moments.
type FamilyMoments = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn family_moments(
    hams: &[ClampedHamiltonian],
    support: &Support,
    family: Option<&FamilyTable>,
    coeffs: &[f64],
) -> Result<FamilyMoments> {
    if let Some(t) = family {
        return Ok((t.member_means(), t.weighted_pairs(&hams[0], coeffs)));
    }
    let moments = hams
        .iter()
        .map(|h| match support {
            Support::Full => exact_moments(h),
            Support::Sampled(s) => support_moments(h, s),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = HiddenMoments::zeros(&hams[0]).pair;
    for (m, &c) in moments.iter().zip(coeffs) {
        for (acc, block) in pairs.iter_mut().zip(&m.pair) {
            for (a, x) in acc.iter_mut().zip(block) {
                *a += c * x;
            }
        }
    }
    Ok((moments.into_iter().map(|m| m.mean).collect(), pairs))
}

impl FreeEnergyHead {
    /// `out += sum_i coeffs[i] dF_i/dtheta` over the actions of a policy
    /// evaluation, in flat parameter layout.
    pub fn accumulate_policy_gradient(
        &self,
        state: &[u8],
        eval: &PolicyEval,
        coeffs: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        if coeffs.len() != eval.hamiltonians.len() {
            return Err(Error::dim(
                "action coefficients",
                eval.hamiltonians.len(),
                coeffs.len(),
            ));
        }
        let visibles = (0..coeffs.len())
            .map(|a| self.visible(state, Some(a)))
            .collect::<Result<Vec<_>>>()?;
        let vis: Vec<&[u8]> = visibles.iter().map(|v| v.as_slice()).collect();
        let (means, pairs) = family_moments(
            &eval.hamiltonians,
            &eval.support,
            eval.family.as_deref(),
            coeffs,
        )?;
        accumulate_weighted_gradient(&self.topo, &vis, &means, &pairs, coeffs, out)
    }

    /// `out += coeff * dF/dtheta` for a value evaluation.
    pub fn accumulate_value_gradient(
        &self,
        state: &[u8],
        eval: &ValueEval,
        coeff: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let v = self.visible(state, None)?;
        let hams = std::slice::from_ref(&eval.hamiltonian);
        let (means, pairs) = family_moments(hams, &eval.support, eval.family.as_deref(), &[coeff])?;
        accumulate_weighted_gradient(&self.topo, &[v.as_slice()], &means, &pairs, &[coeff], out)
    }
}

/// Debug dump of a policy evaluation: `(action, F_i, logit, probability)`.
pub fn write_policy_trace<W: Write>(eval: &PolicyEval, out: W) -> Result<()> {
    let probs = action_distribution(&eval.logits)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["action", "free_energy", "logit", "probability"])?;
    for (a, ((f, l), p)) in eval
        .free_energies
        .iter()
        .zip(&eval.logits)
        .zip(&probs)
        .enumerate()
    {
        w.write_record([a.to_string(), f.to_string(), l.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
