//! Deep Boltzmann Machine structure and energy.
//!
//! Units are binary and ordered `(state, h_1, ..., h_l, action)`. Edges only
//! join adjacent groups: state to `h_1`, `h_k` to `h_{k+1}`, and `h_l` to the
//! action units. Each coupling is stored once for its unordered pair `(i, j)`
//! with `i < j`, which the fixed ordering makes automatic.
//!
//! Fixing the visible (state and action) units turns the machine into a
//! [`ClampedHamiltonian`] over hidden units only: visible biases and
//! visible-visible couplings fold into a constant, and visible-hidden
//! couplings fold into effective hidden biases.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

/// Layered unit structure of a DBM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbmTopology {
    n_state: usize,
    hidden_layers: Vec<usize>,
    n_action: usize,
}

/// Where a unit lives inside a [`DbmTopology`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitRole {
    /// Position within the visible vector `(state, action)`.
    Visible(usize),
    /// Position within the hidden vector `(h_1, ..., h_l)`.
    Hidden(usize),
}

impl DbmTopology {
    pub fn new(n_state: usize, hidden_layers: Vec<usize>, n_action: usize) -> Result<Self> {
        if n_state == 0 {
            return Err(Error::InvalidTopology(
                "at least one state unit is required".into(),
            ));
        }
        if hidden_layers.is_empty() {
            return Err(Error::InvalidTopology(
                "at least one hidden layer is required".into(),
            ));
        }
        if let Some(k) = hidden_layers.iter().position(|&s| s == 0) {
            return Err(Error::InvalidTopology(format!("hidden layer {k} is empty")));
        }
        Ok(DbmTopology {
            n_state,
            hidden_layers,
            n_action,
        })
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn n_action(&self) -> usize {
        self.n_action
    }

    pub fn hidden_layers(&self) -> &[usize] {
        &self.hidden_layers
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_layers.iter().sum()
    }

    pub fn n_visible(&self) -> usize {
        self.n_state + self.n_action
    }

    pub fn n_units(&self) -> usize {
        self.n_visible() + self.n_hidden()
    }

    /// Global index of the first unit of hidden layer `k`.
    pub fn hidden_layer_start(&self, k: usize) -> usize {
        self.n_state + self.hidden_layers[..k].iter().sum::<usize>()
    }

    pub fn action_start(&self) -> usize {
        self.n_state + self.n_hidden()
    }

    pub fn role(&self, unit: usize) -> UnitRole {
        let action_start = self.action_start();
        if unit < self.n_state {
            UnitRole::Visible(unit)
        } else if unit < action_start {
            UnitRole::Hidden(unit - self.n_state)
        } else {
            UnitRole::Visible(self.n_state + unit - action_start)
        }
    }

    /// Global index of the unit at position `pos` of the visible vector.
    pub fn visible_unit(&self, pos: usize) -> usize {
        if pos < self.n_state {
            pos
        } else {
            self.action_start() + (pos - self.n_state)
        }
    }

    /// All permitted edges `(i, j)` with `i < j`, in storage order: state to
    /// `h_1`, then each `h_k` to `h_{k+1}`, then `h_l` to action. Within a
    /// section the lower-indexed endpoint varies slowest.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.n_edges());
        let h1 = self.hidden_layer_start(0);
        for i in 0..self.n_state {
            for j in 0..self.hidden_layers[0] {
                edges.push((i, h1 + j));
            }
        }
        for k in 0..self.hidden_layers.len() - 1 {
            let (a, b) = (self.hidden_layer_start(k), self.hidden_layer_start(k + 1));
            for i in 0..self.hidden_layers[k] {
                for j in 0..self.hidden_layers[k + 1] {
                    edges.push((a + i, b + j));
                }
            }
        }
        let last = self.hidden_layers.len() - 1;
        let hl = self.hidden_layer_start(last);
        let act = self.action_start();
        for i in 0..self.hidden_layers[last] {
            for j in 0..self.n_action {
                edges.push((hl + i, act + j));
            }
        }
        edges
    }

    pub fn n_edges(&self) -> usize {
        let layers = &self.hidden_layers;
        let inner: usize = layers.windows(2).map(|w| w[0] * w[1]).sum();
        self.n_state * layers[0] + inner + layers[layers.len() - 1] * self.n_action
    }

    /// Same topology with the action group replaced.
    pub fn with_actions(&self, n_action: usize) -> Self {
        DbmTopology {
            n_action,
            ..self.clone()
        }
    }
}

/// A binary vector addressing some set of units.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitAssignment(Vec<u8>);

impl UnitAssignment {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if let Some(index) = values.iter().position(|&v| v > 1) {
            return Err(Error::NonBinary {
                index,
                value: values[index],
            });
        }
        Ok(UnitAssignment(values))
    }

    pub fn zeros(n: usize) -> Self {
        UnitAssignment(vec![0; n])
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        UnitAssignment(bits.iter().map(|&b| b as u8).collect())
    }

    /// Little-endian bit pattern of `code` over `n` units.
    pub fn from_code(code: u64, n: usize) -> Self {
        UnitAssignment((0..n).map(|k| ((code >> k) & 1) as u8).collect())
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

/// Offset `a`, per-unit biases `b_i`, per-edge couplings `w_ij` and the
/// inverse temperature `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbmWeights {
    pub offset: f64,
    pub biases: Vec<f64>,
    /// One entry per edge, in [`DbmTopology::edges`] order.
    pub couplings: Vec<f64>,
    pub beta: f64,
}

impl DbmWeights {
    pub fn zeros(topo: &DbmTopology) -> Self {
        DbmWeights {
            offset: 0.0,
            biases: vec![0.0; topo.n_units()],
            couplings: vec![0.0; topo.n_edges()],
            beta: DEFAULT_BETA,
        }
    }

    pub fn check(&self, topo: &DbmTopology) -> Result<()> {
        if self.biases.len() != topo.n_units() {
            return Err(Error::dim("biases", topo.n_units(), self.biases.len()));
        }
        if self.couplings.len() != topo.n_edges() {
            return Err(Error::dim(
                "couplings",
                topo.n_edges(),
                self.couplings.len(),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Trainable parameter count: offset, biases and couplings.
    pub fn n_params(&self) -> usize {
        1 + self.biases.len() + self.couplings.len()
    }

    /// `[offset, biases..., couplings...]`
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        flat.push(self.offset);
        flat.extend_from_slice(&self.biases);
        flat.extend_from_slice(&self.couplings);
        flat
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::dim("flat parameters", self.n_params(), flat.len()));
        }
        let nb = self.biases.len();
        self.offset = flat[0];
        self.biases.copy_from_slice(&flat[1..1 + nb]);
        self.couplings.copy_from_slice(&flat[1 + nb..]);
        Ok(())
    }

    pub fn to_snapshot(&self, topo: &DbmTopology) -> WeightSnapshot {
        WeightSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            n_state: topo.n_state,
            hidden_layers: topo.hidden_layers.clone(),
            n_action: topo.n_action,
            beta: self.beta,
            offset: self.offset,
            biases: self.biases.clone(),
            couplings: topo
                .edges()
                .into_iter()
                .zip(&self.couplings)
                .map(|((i, j), &w)| (i, j, w))
                .collect(),
        }
    }

    pub fn save(&self, topo: &DbmTopology, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_snapshot(topo))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(DbmTopology, DbmWeights)> {
        let text = std::fs::read_to_string(path)?;
        let snapshot: WeightSnapshot = serde_json::from_str(&text)?;
        snapshot.into_parts()
    }
}

const SNAPSHOT_FORMAT: &str = "boltzppo-dbm-weights";
const SNAPSHOT_VERSION: u32 = 1;

/// On-disk record of a DBM: sizes, offset, biases in unit order, couplings
/// keyed by their `(i, j)` unit pair, and beta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSnapshot {
    pub format: String,
    pub version: u32,
    pub n_state: usize,
    pub hidden_layers: Vec<usize>,
    pub n_action: usize,
    pub beta: f64,
    pub offset: f64,
    pub biases: Vec<f64>,
    pub couplings: Vec<(usize, usize, f64)>,
}

impl WeightSnapshot {
    pub fn into_parts(self) -> Result<(DbmTopology, DbmWeights)> {
        if self.format != SNAPSHOT_FORMAT || self.version != SNAPSHOT_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported snapshot {} v{}",
                self.format, self.version
            )));
        }
        let topo = DbmTopology::new(self.n_state, self.hidden_layers, self.n_action)?;
        let index: HashMap<(usize, usize), usize> = topo
            .edges()
            .into_iter()
            .enumerate()
            .map(|(k, e)| (e, k))
            .collect();
        if self.couplings.len() != index.len() {
            return Err(Error::dim(
                "snapshot couplings",
                index.len(),
                self.couplings.len(),
            ));
        }
        let mut couplings = vec![f64::NAN; index.len()];
        for (i, j, w) in self.couplings {
            let key = (i.min(j), i.max(j));
            let k = *index.get(&key).ok_or_else(|| {
                Error::InvalidTopology(format!("edge ({i}, {j}) is not permitted"))
            })?;
            couplings[k] = w;
        }
        if couplings.iter().any(|w| w.is_nan()) {
            return Err(Error::InvalidParameter("snapshot repeats an edge".into()));
        }
        let weights = DbmWeights {
            offset: self.offset,
            biases: self.biases,
            couplings,
            beta: self.beta,
        };
        weights.check(&topo)?;
        Ok((topo, weights))
    }
}

/// Energy `a + sum_i b_i u_i + sum_{i<j} w_ij u_i u_j` over the permitted edges.
pub fn energy(topo: &DbmTopology, weights: &DbmWeights, u: &UnitAssignment) -> Result<f64> {
    weights.check(topo)?;
    if u.len() != topo.n_units() {
        return Err(Error::dim("unit assignment", topo.n_units(), u.len()));
    }
    let u = u.as_slice();
    let mut e = weights.offset;
    for (b, &x) in weights.biases.iter().zip(u) {
        if x == 1 {
            e += b;
        }
    }
    for ((i, j), w) in topo.edges().into_iter().zip(&weights.couplings) {
        if u[i] == 1 && u[j] == 1 {
            e += w;
        }
    }
    Ok(e)
}

/// Uniform `[-scale, scale]` biases and couplings, zero offset, beta 1.
pub fn init_weights(topo: &DbmTopology, seed: u64, scale: f64) -> Result<DbmWeights> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "init scale must be positive, got {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.gen_range(-1.0..=1.0) * scale;
    let biases = (0..topo.n_units()).map(|_| draw()).collect();
    let couplings = (0..topo.n_edges()).map(|_| draw()).collect();
    Ok(DbmWeights {
        offset: 0.0,
        biases,
        couplings,
        beta: DEFAULT_BETA,
    })
}

/// Energy function over hidden units only, for fixed visible units.
///
/// Couplings between hidden layers `k` and `k + 1` are stored row-major as
/// `inter[k][i * size(k + 1) + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampedHamiltonian {
    constant: f64,
    eff_bias: Vec<f64>,
    layers: Vec<usize>,
    inter: Vec<Vec<f64>>,
    beta: f64,
    starts: Vec<usize>,
    layer_of: Vec<usize>,
}

impl ClampedHamiltonian {
    pub fn new(
        constant: f64,
        eff_bias: Vec<f64>,
        layers: Vec<usize>,
        inter: Vec<Vec<f64>>,
        beta: f64,
    ) -> Result<Self> {
        if layers.is_empty() || layers.contains(&0) {
            return Err(Error::InvalidTopology(
                "hidden layers must be non-empty".into(),
            ));
        }
        let n_hidden: usize = layers.iter().sum();
        if eff_bias.len() != n_hidden {
            return Err(Error::dim("effective biases", n_hidden, eff_bias.len()));
        }
        if inter.len() != layers.len() - 1 {
            return Err(Error::dim(
                "inter-layer blocks",
                layers.len() - 1,
                inter.len(),
            ));
        }
        for (k, block) in inter.iter().enumerate() {
            if block.len() != layers[k] * layers[k + 1] {
                return Err(Error::dim(
                    "inter-layer block",
                    layers[k] * layers[k + 1],
                    block.len(),
                ));
            }
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive, got {beta}"
            )));
        }
        let mut starts = Vec::with_capacity(layers.len() + 1);
        let mut layer_of = Vec::with_capacity(n_hidden);
        let mut acc = 0;
        for (k, &size) in layers.iter().enumerate() {
            starts.push(acc);
            layer_of.extend(std::iter::repeat_n(k, size));
            acc += size;
        }
        starts.push(acc);
        Ok(ClampedHamiltonian {
            constant,
            eff_bias,
            layers,
            inter,
            beta,
            starts,
            layer_of,
        })
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn eff_bias(&self) -> &[f64] {
        &self.eff_bias
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn n_hidden(&self) -> usize {
        self.eff_bias.len()
    }

    /// Start of layer `k` within the hidden vector (`k == layers().len()` gives the end).
    pub fn layer_start(&self, k: usize) -> usize {
        self.starts[k]
    }

    pub fn layer_of(&self, unit: usize) -> usize {
        self.layer_of[unit]
    }

    pub fn inter_layer(&self, k: usize) -> &[f64] {
        &self.inter[k]
    }

    /// `(a, b, w)` for every hidden-hidden edge, in hidden-local indices.
    pub fn hidden_couplings(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (k, block) in self.inter.iter().enumerate() {
            let next = self.layers[k + 1];
            for (idx, &w) in block.iter().enumerate() {
                out.push((
                    self.starts[k] + idx / next,
                    self.starts[k + 1] + idx % next,
                    w,
                ));
            }
        }
        out
    }

    pub fn shifted(&self, delta: f64) -> Self {
        ClampedHamiltonian {
            constant: self.constant + delta,
            ..self.clone()
        }
    }

    /// Energy of a hidden configuration without length checks.
    pub fn energy_of(&self, h: &[u8]) -> f64 {
        let mut e = self.constant;
        for (b, &x) in self.eff_bias.iter().zip(h) {
            if x == 1 {
                e += b;
            }
        }
        for (k, block) in self.inter.iter().enumerate() {
            let next = self.layers[k + 1];
            let (a, b) = (self.starts[k], self.starts[k + 1]);
            for i in 0..self.layers[k] {
                if h[a + i] == 0 {
                    continue;
                }
                let row = &block[i * next..(i + 1) * next];
                for (w, &x) in row.iter().zip(&h[b..b + next]) {
                    if x == 1 {
                        e += w;
                    }
                }
            }
        }
        e
    }

    /// `E(h | unit = 1) - E(h | unit = 0)`.
    pub fn local_field(&self, h: &[u8], unit: usize) -> f64 {
        let k = self.layer_of[unit];
        let j = unit - self.starts[k];
        let mut f = self.eff_bias[unit];
        if k > 0 {
            let size = self.layers[k];
            let prev = self.starts[k - 1];
            let block = &self.inter[k - 1];
            for i in 0..self.layers[k - 1] {
                if h[prev + i] == 1 {
                    f += block[i * size + j];
                }
            }
        }
        if k + 1 < self.layers.len() {
            let next = self.layers[k + 1];
            let start = self.starts[k + 1];
            let row = &self.inter[k][j * next..(j + 1) * next];
            for (w, &x) in row.iter().zip(&h[start..start + next]) {
                if x == 1 {
                    f += w;
                }
            }
        }
        f
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.layers == other.layers && self.beta == other.beta
    }
}

/// Energy of a hidden configuration under a clamped Hamiltonian.
pub fn hidden_energy(ch: &ClampedHamiltonian, h: &UnitAssignment) -> Result<f64> {
    if h.len() != ch.n_hidden() {
        return Err(Error::dim("hidden assignment", ch.n_hidden(), h.len()));
    }
    Ok(ch.energy_of(h.as_slice()))
}

/// Fix the visible units (state then action) and fold them into the
/// hidden-only energy.
pub fn clamp(
    topo: &DbmTopology,
    weights: &DbmWeights,
    visible: &UnitAssignment,
) -> Result<ClampedHamiltonian> {
    weights.check(topo)?;
    if visible.len() != topo.n_visible() {
        return Err(Error::dim(
            "visible assignment",
            topo.n_visible(),
            visible.len(),
        ));
    }
    let v = visible.as_slice();
    let mut constant = weights.offset;
    let mut eff_bias = vec![0.0; topo.n_hidden()];
    for (unit, &b) in weights.biases.iter().enumerate() {
        match topo.role(unit) {
            UnitRole::Visible(p) => constant += b * v[p] as f64,
            UnitRole::Hidden(h) => eff_bias[h] = b,
        }
    }
    let layers = topo.hidden_layers().to_vec();
    let mut inter: Vec<Vec<f64>> = layers
        .windows(2)
        .map(|w| Vec::with_capacity(w[0] * w[1]))
        .collect();
    let mut starts = vec![0];
    for s in &layers {
        starts.push(starts.last().unwrap() + s);
    }
    for ((i, j), &w) in topo.edges().iter().zip(&weights.couplings) {
        match (topo.role(*i), topo.role(*j)) {
            (UnitRole::Visible(p), UnitRole::Visible(q)) => constant += w * (v[p] * v[q]) as f64,
            (UnitRole::Visible(p), UnitRole::Hidden(h))
            | (UnitRole::Hidden(h), UnitRole::Visible(p)) => eff_bias[h] += w * v[p] as f64,
            (UnitRole::Hidden(a), UnitRole::Hidden(_)) => {
                // hidden-hidden edges arrive in row-major block order
                let k = starts.partition_point(|&s| s <= a) - 1;
                inter[k].push(w);
            }
        }
    }
    ClampedHamiltonian::new(constant, eff_bias, layers, inter, weights.beta)
}

/// One clamped Hamiltonian per one-hot action for a fixed state. Equal to
/// calling [`clamp`] once per action, with the state folded in only once.
pub fn clamp_actions(
    topo: &DbmTopology,
    weights: &DbmWeights,
    state: &[u8],
) -> Result<Vec<ClampedHamiltonian>> {
    if state.len() != topo.n_state() {
        return Err(Error::dim("state", topo.n_state(), state.len()));
    }
    let mut v = state.to_vec();
    v.resize(topo.n_visible(), 0);
    let base = clamp(topo, weights, &UnitAssignment::new(v.clone())?)?;
    let action_start = topo.action_start();
    let mut out: Vec<ClampedHamiltonian> = (0..topo.n_action())
        .map(|a| {
            let mut ch = base.clone();
            ch.constant += weights.biases[action_start + a];
            ch
        })
        .collect();
    for ((i, j), &w) in topo.edges().iter().zip(&weights.couplings) {
        let (unit, other) = match (*i >= action_start, *j >= action_start) {
            (false, true) => (*j, *i),
            (true, false) => (*i, *j),
            // action-action pairs never both fire under a one-hot action
            _ => continue,
        };
        let ch = &mut out[unit - action_start];
        match topo.role(other) {
            UnitRole::Hidden(h) => ch.eff_bias[h] += w,
            UnitRole::Visible(p) => ch.constant += w * v[p] as f64,
        }
    }
    Ok(out)
}

/// Field-wise arithmetic mean of Hamiltonians over the same hidden units.
pub fn mean_hamiltonian(hams: &[ClampedHamiltonian]) -> Result<ClampedHamiltonian> {
    let first = hams.first().ok_or(Error::Empty("hamiltonian list"))?;
    if let Some(bad) = hams.iter().position(|h| !first.same_structure(h)) {
        return Err(Error::StructureMismatch(format!(
            "hamiltonian {bad} differs in hidden layers or beta"
        )));
    }
    let n = hams.len() as f64;
    let constant = hams.iter().map(|h| h.constant).sum::<f64>() / n;
    let mut eff_bias = vec![0.0; first.n_hidden()];
    let mut inter: Vec<Vec<f64>> = first.inter.iter().map(|b| vec![0.0; b.len()]).collect();
    for h in hams {
        for (acc, x) in eff_bias.iter_mut().zip(&h.eff_bias) {
            *acc += x;
        }
        for (acc_block, block) in inter.iter_mut().zip(&h.inter) {
            for (acc, x) in acc_block.iter_mut().zip(block) {
                *acc += x;
            }
        }
    }
    eff_bias.iter_mut().for_each(|x| *x /= n);
    inter.iter_mut().flatten().for_each(|x| *x /= n);
    ClampedHamiltonian::new(constant, eff_bias, first.layers.clone(), inter, first.beta)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn random_model(
        seed: u64,
        n_state: usize,
        layers: Vec<usize>,
        n_action: usize,
        scale: f64,
    ) -> (DbmTopology, DbmWeights) {
        let topo = DbmTopology::new(n_state, layers, n_action).unwrap();
        let mut w = init_weights(&topo, seed, scale).unwrap();
        w.offset = scale * 0.37;
        (topo, w)
    }

    /// Dense upper-triangular coupling matrix built from the snapshot keys.
    fn dense(topo: &DbmTopology, w: &DbmWeights) -> Vec<Vec<f64>> {
        let n = topo.n_units();
        let mut m = vec![vec![0.0; n]; n];
        for (i, j, x) in w.to_snapshot(topo).couplings {
            m[i][j] = x;
        }
        m
    }

    fn naive_energy(a: f64, b: &[f64], m: &[Vec<f64>], u: &[u8]) -> f64 {
        let n = b.len();
        let mut e = a;
        for i in 0..n {
            e += b[i] * u[i] as f64;
            for j in (i + 1)..n {
                e += m[i][j] * (u[i] * u[j]) as f64;
            }
        }
        e
    }

    #[test]
    fn zero_parameters_give_zero_energy() {
        let topo = DbmTopology::new(3, vec![2, 2], 1).unwrap();
        let w = DbmWeights::zeros(&topo);
        let u = UnitAssignment::new(vec![1, 0, 1, 1, 1, 0, 1, 1]).unwrap();
        assert_eq!(energy(&topo, &w, &u).unwrap(), 0.0);
    }

    #[test]
    fn three_unit_direct_evaluation() {
        // one state unit feeding a two-unit hidden layer: edges (0,1) and (0,2)
        let topo = DbmTopology::new(1, vec![2], 0).unwrap();
        assert_eq!(topo.edges(), vec![(0, 1), (0, 2)]);
        let w = DbmWeights {
            offset: 0.5,
            biases: vec![1.0, -2.0, 0.25],
            couplings: vec![0.0, -1.0],
            beta: 1.0,
        };
        let u = UnitAssignment::new(vec![1, 0, 1]).unwrap();
        assert!((energy(&topo, &w, &u).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn energy_matches_naive_summation() {
        let (topo, w) = random_model(11, 2, vec![2, 1], 1, 1.0);
        assert_eq!(topo.n_units(), 6);
        let m = dense(&topo, &w);
        for code in 0..64u64 {
            let u = UnitAssignment::from_code(code, 6);
            let fast = energy(&topo, &w, &u).unwrap();
            let slow = naive_energy(w.offset, &w.biases, &m, u.as_slice());
            assert!((fast - slow).abs() < 1e-12, "code {code}");
        }
    }

    #[test]
    fn energy_rejects_wrong_length() {
        let topo = DbmTopology::new(2, vec![2], 0).unwrap();
        let w = DbmWeights::zeros(&topo);
        assert!(matches!(
            energy(&topo, &w, &UnitAssignment::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn topology_rejects_empty_groups() {
        assert!(DbmTopology::new(0, vec![2], 1).is_err());
        assert!(DbmTopology::new(2, vec![], 1).is_err());
        assert!(DbmTopology::new(2, vec![3, 0], 1).is_err());
        assert!(DbmTopology::new(2, vec![3], 0).is_ok());
    }

    #[test]
    fn edges_follow_layered_chain() {
        let topo = DbmTopology::new(2, vec![3, 2], 2).unwrap();
        let edges = topo.edges();
        assert_eq!(edges.len(), topo.n_edges());
        assert_eq!(edges.len(), 2 * 3 + 3 * 2 + 2 * 2);
        for &(i, j) in &edges {
            assert!(i < j);
            let group = |u: usize| match u {
                0..=1 => 0,
                2..=4 => 1,
                5..=6 => 2,
                _ => 3,
            };
            assert_eq!(
                group(j),
                group(i) + 1,
                "edge ({i},{j}) skips or stays in a layer"
            );
        }
    }

    #[test]
    fn one_edge_clamp() {
        let topo = DbmTopology::new(1, vec![1], 0).unwrap();
        let w = DbmWeights {
            offset: 0.0,
            biases: vec![0.3, 0.1],
            couplings: vec![0.7],
            beta: 1.0,
        };
        let ch = clamp(&topo, &w, &UnitAssignment::new(vec![1]).unwrap()).unwrap();
        assert!((ch.constant() - 0.3).abs() < 1e-15);
        assert!((ch.eff_bias()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_clamp_keeps_hidden_biases() {
        let (topo, w) = random_model(3, 3, vec![2, 3], 2, 0.5);
        let ch = clamp(&topo, &w, &UnitAssignment::zeros(5)).unwrap();
        assert_eq!(ch.constant(), w.offset);
        assert_eq!(ch.eff_bias(), &w.biases[3..8]);
    }

    #[test]
    fn clamp_actions_matches_per_action_clamp() {
        for seed in 0..20 {
            let (topo, w) = random_model(seed, 3, vec![4, 3, 2], 4, 0.8);
            let state = [(seed & 1) as u8, 1, ((seed >> 1) & 1) as u8];
            let hams = clamp_actions(&topo, &w, &state).unwrap();
            assert_eq!(hams.len(), 4);
            for (a, got) in hams.iter().enumerate() {
                let mut v = state.to_vec();
                v.extend((0..4).map(|i| (i == a) as u8));
                let want = clamp(&topo, &w, &UnitAssignment::new(v).unwrap()).unwrap();
                assert!((got.constant() - want.constant()).abs() < 1e-12);
                for (x, y) in got.eff_bias().iter().zip(want.eff_bias()) {
                    assert!((x - y).abs() < 1e-12);
                }
                assert_eq!(got.layers(), want.layers());
                for k in 0..2 {
                    assert_eq!(got.inter_layer(k), want.inter_layer(k));
                }
            }
        }
    }

    #[test]
    fn clamp_rejects_wrong_visible_length() {
        let (topo, w) = random_model(3, 3, vec![2], 2, 0.5);
        assert!(clamp(&topo, &w, &UnitAssignment::zeros(3)).is_err());
    }

    #[test]
    fn clamped_energy_equals_full_energy_exhaustively() {
        let (topo, w) = random_model(5, 3, vec![2, 2], 0, 1.0);
        for vcode in 0..8u64 {
            let v = UnitAssignment::from_code(vcode, 3);
            let ch = clamp(&topo, &w, &v).unwrap();
            for hcode in 0..16u64 {
                let h = UnitAssignment::from_code(hcode, 4);
                let mut full = v.as_slice().to_vec();
                full.extend_from_slice(h.as_slice());
                let direct = energy(&topo, &w, &UnitAssignment::new(full).unwrap()).unwrap();
                let reduced = hidden_energy(&ch, &h).unwrap();
                assert!((direct - reduced).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hidden_energy_small_cases() {
        let ch = ClampedHamiltonian::new(0.0, vec![1.0], vec![1], vec![], 1.0).unwrap();
        assert_eq!(
            hidden_energy(&ch, &UnitAssignment::new(vec![1]).unwrap()).unwrap(),
            1.0
        );
        let (topo, w) = random_model(8, 2, vec![3, 2], 1, 1.0);
        let ch = clamp(&topo, &w, &UnitAssignment::new(vec![1, 0, 1]).unwrap()).unwrap();
        assert_eq!(
            hidden_energy(&ch, &UnitAssignment::zeros(5)).unwrap(),
            ch.constant()
        );
        assert!(hidden_energy(&ch, &UnitAssignment::zeros(4)).is_err());
    }

    #[test]
    fn local_field_is_energy_difference() {
        let (topo, w) = random_model(21, 2, vec![3, 2, 2], 1, 1.0);
        let ch = clamp(&topo, &w, &UnitAssignment::new(vec![0, 1, 1]).unwrap()).unwrap();
        for code in 0..(1u64 << 7) {
            let mut h = UnitAssignment::from_code(code, 7).into_inner();
            for k in 0..7 {
                h[k] = 1;
                let e1 = ch.energy_of(&h);
                h[k] = 0;
                let e0 = ch.energy_of(&h);
                assert!((ch.local_field(&h, k) - (e1 - e0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_of_identical_is_identity() {
        let (topo, w) = random_model(2, 2, vec![2, 2], 0, 1.0);
        let ch = clamp(&topo, &w, &UnitAssignment::new(vec![1, 0]).unwrap()).unwrap();
        let m = mean_hamiltonian(&[ch.clone(), ch.clone(), ch.clone()]).unwrap();
        assert_eq!(m.layers(), ch.layers());
        for (a, b) in m.eff_bias().iter().zip(ch.eff_bias()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((m.constant() - ch.constant()).abs() < 1e-15);
    }

    #[test]
    fn mean_midpoint() {
        let a = ClampedHamiltonian::new(0.0, vec![0.0], vec![1], vec![], 1.0).unwrap();
        let b = ClampedHamiltonian::new(0.0, vec![1.0], vec![1], vec![], 1.0).unwrap();
        assert_eq!(mean_hamiltonian(&[a, b]).unwrap().eff_bias(), &[0.5]);
    }

    #[test]
    fn mean_of_action_hamiltonians_matches_parameter_averaging() {
        let (topo, w) = random_model(17, 3, vec![2, 3], 2, 1.0);
        let state = [1u8, 0, 1];
        let hams: Vec<_> = (0..2)
            .map(|a| {
                let mut v = state.to_vec();
                v.extend((0..2).map(|i| (i == a) as u8));
                clamp(&topo, &w, &UnitAssignment::new(v).unwrap()).unwrap()
            })
            .collect();
        let m = mean_hamiltonian(&hams).unwrap();
        // naive: average the action one-hot to (0.5, 0.5) and fold it in by hand
        let dense = dense(&topo, &w);
        let visible: Vec<(usize, f64)> = vec![(0, 1.0), (1, 0.0), (2, 1.0), (8, 0.5), (9, 0.5)];
        let mut constant = w.offset;
        for &(i, x) in &visible {
            constant += w.biases[i] * x;
        }
        assert!((m.constant() - constant).abs() < 1e-12);
        for h in 0..5 {
            let g = 3 + h;
            let mut b = w.biases[g];
            for &(i, x) in &visible {
                b += (dense[i.min(g)][i.max(g)]) * x;
            }
            assert!((m.eff_bias()[h] - b).abs() < 1e-12);
        }
        assert_eq!(m.inter_layer(0), hams[0].inter_layer(0));
    }

    #[test]
    fn mean_rejects_empty_and_mismatched() {
        assert!(matches!(mean_hamiltonian(&[]), Err(Error::Empty(_))));
        let a = ClampedHamiltonian::new(0.0, vec![0.0], vec![1], vec![], 1.0).unwrap();
        let b = ClampedHamiltonian::new(0.0, vec![0.0, 0.0], vec![2], vec![], 1.0).unwrap();
        let c = ClampedHamiltonian::new(0.0, vec![0.0], vec![1], vec![], 2.0).unwrap();
        assert!(mean_hamiltonian(&[a.clone(), b]).is_err());
        assert!(mean_hamiltonian(&[a, c]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let topo = DbmTopology::new(4, vec![3, 3], 2).unwrap();
        let a = init_weights(&topo, 1, 0.1).unwrap();
        let b = init_weights(&topo, 1, 0.1).unwrap();
        let c = init_weights(&topo, 2, 0.1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flatten(), c.flatten());
        assert_eq!(a.offset, 0.0);
        assert!(a.flatten().iter().all(|x| x.abs() <= 0.1));
        let tiny = init_weights(&topo, 1, 1e-300).unwrap();
        assert!(tiny.flatten().iter().all(|x| x.abs() <= 1e-300));
        assert!(init_weights(&topo, 1, 0.0).is_err());
        assert!(init_weights(&topo, 1, -1.0).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let (topo, w) = random_model(4, 2, vec![2], 3, 1.0);
        let mut z = DbmWeights::zeros(&topo);
        z.assign_flat(&w.flatten()).unwrap();
        assert_eq!(z, w);
        assert!(z.assign_flat(&[0.0]).is_err());
    }

    #[test]
    fn snapshot_file_round_trip_is_bit_exact() {
        let (topo, mut w) = random_model(99, 5, vec![4, 3], 3, 0.7);
        w.beta = 1.0 / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        w.save(&topo, &path).unwrap();
        let (t2, w2) = DbmWeights::load(&path).unwrap();
        assert_eq!(t2, topo);
        assert_eq!(
            w.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            w2.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(w.beta.to_bits(), w2.beta.to_bits());
    }

    #[test]
    fn snapshot_rejects_forbidden_edge() {
        let (topo, w) = random_model(1, 2, vec![2], 0, 0.5);
        let mut snap = w.to_snapshot(&topo);
        snap.couplings[0] = (0, 1, 0.5); // state-state edge
        assert!(snap.into_parts().is_err());
    }

    proptest! {
        #[test]
        fn clamping_identity(seed in 0u64..10_000, vcode in 0u64..64, hcode in 0u64..64,
                             n_state in 1usize..4, l1 in 1usize..4, l2 in 0usize..3, n_action in 0usize..3) {
            let mut layers = vec![l1];
            if l2 > 0 { layers.push(l2); }
            let (topo, w) = random_model(seed, n_state, layers, n_action, 2.0);
            let nv = topo.n_visible();
            let nh = topo.n_hidden();
            let v = UnitAssignment::from_code(vcode % (1 << nv), nv);
            let h = UnitAssignment::from_code(hcode % (1 << nh), nh);
            let ch = clamp(&topo, &w, &v).unwrap();
            let mut u = vec![0u8; topo.n_units()];
            for p in 0..nv { u[topo.visible_unit(p)] = v.as_slice()[p]; }
            u[n_state..n_state + nh].copy_from_slice(h.as_slice());
            let full = energy(&topo, &w, &UnitAssignment::new(u).unwrap()).unwrap();
            prop_assert!((full - hidden_energy(&ch, &h).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn energy_invariant_under_reindexing(seed in 0u64..10_000, code in 0u64..512, perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let (topo, w) = random_model(seed, 3, vec![2, 2], 2, 1.0);
            let n = topo.n_units();
            let u = UnitAssignment::from_code(code, n);
            let m = dense(&topo, &w);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            // unit i moves to position perm[i]
            let mut pb = vec![0.0; n];
            let mut pu = vec![0u8; n];
            let mut pm = vec![vec![0.0; n]; n];
            for i in 0..n {
                pb[perm[i]] = w.biases[i];
                pu[perm[i]] = u.as_slice()[i];
                for j in (i + 1)..n {
                    let (a, b) = (perm[i].min(perm[j]), perm[i].max(perm[j]));
                    pm[a][b] = m[i][j];
                }
            }
            let original = energy(&topo, &w, &u).unwrap();
            prop_assert!((original - naive_energy(w.offset, &pb, &pm, &pu)).abs() < 1e-12);
        }

        #[test]
        fn mean_commutes_with_constant_shift(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let (topo, w) = random_model(seed, 2, vec![2, 2], 0, 1.0);
            let a = clamp(&topo, &w, &UnitAssignment::new(vec![1, 0]).unwrap()).unwrap();
            let b = clamp(&topo, &w, &UnitAssignment::new(vec![0, 1]).unwrap()).unwrap();
            let m = mean_hamiltonian(&[a.clone(), b.clone()]).unwrap();
            let ms = mean_hamiltonian(&[a.shifted(shift), b.shifted(shift)]).unwrap();
            prop_assert!((ms.constant() - (m.constant() + shift)).abs() < 1e-12);
            prop_assert_eq!(ms.eff_bias(), m.eff_bias());
        }
    }
}
