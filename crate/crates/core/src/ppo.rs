//! Proximal policy optimisation over pluggable heads.
//!
//! A head is either a tanh MLP trained by backpropagation or a
//! [`FreeEnergyHead`] whose gradient is the negated free-energy gradient.
//! Both kinds share one Adam optimizer implementation and one global
//! gradient-norm clip.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::free_energy::{
    action_distribution, FreeEnergyHead, HeadKind, HeadState, PolicyEval, Support, ValueEval,
};
use crate::sampler::log_sum_exp;
use crate::{Error, Result};

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<u8>,
    pub reward: f64,
    pub done: bool,
}

/// Discrete-action episodic environment with binary observations.
pub trait Environment {
    fn observation_size(&self) -> usize;
    fn action_count(&self) -> usize;
    /// Current observation.
    fn observation(&self) -> Vec<u8>;
    /// Start the next episode and return its first observation.
    fn reset(&mut self) -> Vec<u8>;
    fn step(&mut self, action: usize) -> Result<Transition>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    /// Learning rate for DBM heads; `learning_rate` when absent.
    pub dbm_learning_rate: Option<f64>,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub n_steps: usize,
    pub n_epochs: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Score update-time DBM evaluations on the supports drawn during the
    /// rollout instead of sampling afresh.
    pub reuse_rollout_support: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 3e-4,
            dbm_learning_rate: None,
            clip_epsilon: 0.2,
            gamma: 0.9,
            gae_lambda: 0.95,
            n_steps: 60,
            n_epochs: 20,
            minibatch_size: 15,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            normalize_advantages: true,
            reuse_rollout_support: false,
        }
    }
}

impl PpoConfig {
    pub fn learning_rate_for(&self, head: &Network) -> f64 {
        match (head.is_dbm(), self.dbm_learning_rate) {
            (true, Some(lr)) => lr,
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if let Some(lr) = self.dbm_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("dbm_learning_rate must be > 0, got {lr}"));
            }
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!(
                "gae_lambda must lie in [0, 1], got {}",
                self.gae_lambda
            ));
        }
        if self.n_steps == 0 || self.n_epochs == 0 || self.minibatch_size == 0 {
            return bad("n_steps, n_epochs and minibatch_size must be positive".into());
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0) {
            return bad("entropy_coef and value_coef must be non-negative".into());
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad(format!(
                "max_grad_norm must be > 0, got {}",
                self.max_grad_norm
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => (y > 0.0) as u8 as f64,
            Activation::Linear => 1.0,
        }
    }
}

/// Fully connected network. Hidden layers use `activation`, the output layer
/// is affine. Parameters are stored flat, layer by layer, each layer as its
/// row-major `out x in` weight matrix followed by its bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpHead {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

impl MlpHead {
    pub fn zeros(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidTopology(format!(
                "MLP needs at least input and output layers of positive size, got {sizes:?}"
            )));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(MlpHead {
            sizes,
            activation,
            params: vec![0.0; n],
        })
    }

    /// Random init: weights uniform with variance `gain^2 / fan_in`, biases
    /// zero. Hidden layers use gain sqrt(2); the output layer `output_gain`.
    pub fn init(
        sizes: Vec<usize>,
        activation: Activation,
        output_gain: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut head = Self::zeros(sizes, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = head.sizes.len() - 1;
        let mut at = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (head.sizes[l], head.sizes[l + 1]);
            let gain = if l + 1 == n_layers {
                output_gain
            } else {
                2f64.sqrt()
            };
            let half = gain * (3.0 / n_in as f64).sqrt();
            for p in &mut head.params[at..at + n_in * n_out] {
                *p = rng.gen_range(-half..=half);
            }
            at += n_in * n_out + n_out;
        }
        Ok(head)
    }

    /// Input, hidden layers and output for a default-shaped head.
    pub fn standard(n_in: usize, n_out: usize, output_gain: f64, seed: u64) -> Result<Self> {
        let mut sizes = vec![n_in];
        sizes.extend(DEFAULT_HIDDEN);
        sizes.push(n_out);
        Self::init(sizes, Activation::Tanh, output_gain, seed)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim(
                "MLP parameters",
                self.params.len(),
                params.len(),
            ));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Validate sizes against the parameter vector, e.g. after deserialising.
    pub fn check(&self) -> Result<()> {
        let expect = Self::zeros(self.sizes.clone(), self.activation)?;
        if expect.params.len() != self.params.len() {
            return Err(Error::dim(
                "MLP parameters",
                expect.params.len(),
                self.params.len(),
            ));
        }
        Ok(())
    }
}

/// Layer outputs of one forward pass, input first.
pub type MlpTrace = Vec<Vec<f64>>;

pub fn mlp_forward(head: &MlpHead, input: &[f64]) -> Result<Vec<f64>> {
    Ok(mlp_forward_trace(head, input)?.pop().unwrap())
}

pub fn mlp_forward_trace(head: &MlpHead, input: &[f64]) -> Result<MlpTrace> {
    if input.len() != head.n_inputs() {
        return Err(Error::dim("MLP input", head.n_inputs(), input.len()));
    }
    let n_layers = head.sizes.len() - 1;
    let mut trace = Vec::with_capacity(n_layers + 1);
    trace.push(input.to_vec());
    let mut at = 0;
    for l in 0..n_layers {
        let (n_in, n_out) = (head.sizes[l], head.sizes[l + 1]);
        let w = &head.params[at..at + n_in * n_out];
        let b = &head.params[at + n_in * n_out..at + n_in * n_out + n_out];
        let x = &trace[l];
        let act = if l + 1 == n_layers {
            Activation::Linear
        } else {
            head.activation
        };
        let y: Vec<f64> = (0..n_out)
            .map(|o| {
                let z = b[o]
                    + w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(x)
                        .map(|(w, x)| w * x)
                        .sum::<f64>();
                act.apply(z)
            })
            .collect();
        trace.push(y);
        at += n_in * n_out + n_out;
    }
    Ok(trace)
}

/// Backpropagate `d_out` (gradient of a scalar loss w.r.t. the outputs)
/// through a forward trace. Adds the parameter gradient into `grad` and
/// returns the gradient w.r.t. the input.
pub fn mlp_backward(
    head: &MlpHead,
    trace: &MlpTrace,
    d_out: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let n_layers = head.sizes.len() - 1;
    if trace.len() != n_layers + 1 {
        return Err(Error::dim("MLP trace layers", n_layers + 1, trace.len()));
    }
    if d_out.len() != head.n_outputs() {
        return Err(Error::dim(
            "MLP output gradient",
            head.n_outputs(),
            d_out.len(),
        ));
    }
    if grad.len() != head.params.len() {
        return Err(Error::dim(
            "MLP gradient buffer",
            head.params.len(),
            grad.len(),
        ));
    }
    let mut offsets = Vec::with_capacity(n_layers);
    let mut at = 0;
    for l in 0..n_layers {
        offsets.push(at);
        at += head.sizes[l] * head.sizes[l + 1] + head.sizes[l + 1];
    }
    let mut delta = d_out.to_vec();
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (head.sizes[l], head.sizes[l + 1]);
        if l + 1 != n_layers {
            for (d, y) in delta.iter_mut().zip(&trace[l + 1]) {
                *d *= head.activation.derivative(*y);
            }
        }
        let at = offsets[l];
        let x = &trace[l];
        let w = &head.params[at..at + n_in * n_out];
        let mut d_in = vec![0.0; n_in];
        for o in 0..n_out {
            let d = delta[o];
            let row = at + o * n_in;
            for i in 0..n_in {
                grad[row + i] += d * x[i];
                d_in[i] += d * w[o * n_in + i];
            }
            grad[at + n_in * n_out + o] += d;
        }
        delta = d_in;
    }
    Ok(delta)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.len();
    for (what, len) in [
        ("gradient", grads.len()),
        ("Adam m", state.m.len()),
        ("Adam v", state.v.len()),
    ] {
        if len != n {
            return Err(Error::dim(what, n, len));
        }
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// A value or policy function approximator.
#[derive(Debug, Clone)]
pub enum Network {
    Mlp(MlpHead),
    Dbm(FreeEnergyHead),
}

/// Whatever a head needs from its forward pass to compute gradients.
#[derive(Debug, Clone)]
pub enum HeadEval {
    Mlp(MlpTrace),
    DbmValue(ValueEval),
    DbmPolicy(PolicyEval),
}

impl HeadEval {
    pub fn support(&self) -> Option<&Support> {
        match self {
            HeadEval::Mlp(_) => None,
            HeadEval::DbmValue(e) => Some(&e.support),
            HeadEval::DbmPolicy(e) => Some(&e.support),
        }
    }
}

/// Serializable form of a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum NetworkState {
    Mlp(MlpHead),
    Dbm(HeadState),
}

fn to_f64(obs: &[u8]) -> Vec<f64> {
    obs.iter().map(|&x| x as f64).collect()
}

impl Network {
    pub fn n_inputs(&self) -> usize {
        match self {
            Network::Mlp(h) => h.n_inputs(),
            Network::Dbm(h) => h.n_state(),
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            Network::Mlp(h) => h.n_outputs(),
            Network::Dbm(h) => match h.kind() {
                HeadKind::Value => 1,
                HeadKind::Policy { n_actions } => n_actions,
            },
        }
    }

    pub fn is_dbm(&self) -> bool {
        matches!(self, Network::Dbm(_))
    }

    pub fn n_params(&self) -> usize {
        match self {
            Network::Mlp(h) => h.params.len(),
            Network::Dbm(h) => h.weights().n_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Network::Mlp(h) => h.params.clone(),
            Network::Dbm(h) => h.weights().flatten(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            Network::Mlp(h) => h.set_params(params),
            Network::Dbm(h) => h.weights_mut().assign_flat(params),
        }
    }

    pub fn sampler_calls(&self) -> u64 {
        match self {
            Network::Mlp(_) => 0,
            Network::Dbm(h) => h.sampler_calls(),
        }
    }

    /// Reserve `n` sampler streams; `None` for MLP heads.
    pub fn reserve_streams(&self, n: u64) -> Option<u64> {
        match self {
            Network::Mlp(_) => None,
            Network::Dbm(h) => Some(h.reserve_streams(n)),
        }
    }

    pub fn state(&self) -> NetworkState {
        match self {
            Network::Mlp(h) => NetworkState::Mlp(h.clone()),
            Network::Dbm(h) => NetworkState::Dbm(h.state()),
        }
    }

    pub fn from_state(state: NetworkState) -> Result<Self> {
        match state {
            NetworkState::Mlp(h) => {
                h.check()?;
                Ok(Network::Mlp(h))
            }
            NetworkState::Dbm(s) => Ok(Network::Dbm(FreeEnergyHead::from_state(s)?)),
        }
    }

    /// Outputs (logits or a single value) for one observation. DBM heads
    /// draw one support on `stream`, or on the next stream when `None`.
    pub fn forward(&self, obs: &[u8], stream: Option<u64>) -> Result<(Vec<f64>, HeadEval)> {
        match self {
            Network::Mlp(h) => {
                let trace = mlp_forward_trace(h, &to_f64(obs))?;
                Ok((trace.last().unwrap().clone(), HeadEval::Mlp(trace)))
            }
            Network::Dbm(h) => {
                let stream = stream.unwrap_or_else(|| h.reserve_streams(1));
                match h.kind() {
                    HeadKind::Value => {
                        let e = h.value_eval_at(obs, stream)?;
                        Ok((vec![e.value], HeadEval::DbmValue(e)))
                    }
                    HeadKind::Policy { .. } => {
                        let e = h.policy_eval_at(obs, stream)?;
                        Ok((e.logits.clone(), HeadEval::DbmPolicy(e)))
                    }
                }
            }
        }
    }

    /// Forward pass of a DBM head on a given support, without sampling.
    /// MLP heads ignore the support.
    pub fn forward_on(&self, obs: &[u8], support: Support) -> Result<(Vec<f64>, HeadEval)> {
        match self {
            Network::Mlp(_) => self.forward(obs, None),
            Network::Dbm(h) => match h.kind() {
                HeadKind::Value => {
                    let e = h.value_eval_on(obs, support)?;
                    Ok((vec![e.value], HeadEval::DbmValue(e)))
                }
                HeadKind::Policy { .. } => {
                    let e = h.policy_eval_on(obs, support)?;
                    Ok((e.logits.clone(), HeadEval::DbmPolicy(e)))
                }
            },
        }
    }

    /// Add `d loss / d params` into `grad`, given `d_out = d loss / d outputs`.
    pub fn backward(
        &self,
        obs: &[u8],
        eval: &HeadEval,
        d_out: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if d_out.len() != self.n_outputs() {
            return Err(Error::dim("output gradient", self.n_outputs(), d_out.len()));
        }
        if grad.len() != self.n_params() {
            return Err(Error::dim("gradient buffer", self.n_params(), grad.len()));
        }
        match (self, eval) {
            (Network::Mlp(h), HeadEval::Mlp(trace)) => {
                mlp_backward(h, trace, d_out, grad)?;
            }
            (Network::Dbm(h), HeadEval::DbmValue(e)) => {
                // V = -F
                h.accumulate_value_gradient(obs, e, -d_out[0], grad)?;
            }
            (Network::Dbm(h), HeadEval::DbmPolicy(e)) => {
                // logit_i = -F_i
                let coeffs: Vec<f64> = d_out.iter().map(|d| -d).collect();
                h.accumulate_policy_gradient(obs, e, &coeffs, grad)?;
            }
            _ => {
                return Err(Error::StructureMismatch(
                    "head evaluation does not belong to this network".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Log-softmax of the logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lz = log_sum_exp(logits);
    logits.iter().map(|l| l - lz).collect()
}

/// Draw an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// One finished episode seen during a rollout.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeSummary {
    pub total_reward: f64,
    pub steps: usize,
    pub finished: Instant,
}

/// Running totals of the episode in progress; carried across rollouts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTracker {
    pub reward: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub observations: Vec<Vec<u8>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Filled by [`compute_gae`].
    pub advantages: Vec<f64>,
    /// Filled by [`compute_gae`].
    pub returns: Vec<f64>,
    /// Value estimate of the observation following the last step.
    pub bootstrap_value: f64,
    /// Rollout-time supports, kept only when asked for.
    pub policy_supports: Vec<Option<Support>>,
    pub value_supports: Vec<Option<Support>>,
    pub episodes: Vec<EpisodeSummary>,
    pub policy_evaluations: u64,
    pub value_evaluations: u64,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn has_gae(&self) -> bool {
        self.advantages.len() == self.len() && self.returns.len() == self.len()
    }

    /// Check the equal-length and finiteness invariants.
    pub fn check(&self) -> Result<()> {
        let n = self.len();
        for (what, len) in [
            ("observations", self.observations.len()),
            ("log_probs", self.log_probs.len()),
            ("rewards", self.rewards.len()),
            ("values", self.values.len()),
            ("dones", self.dones.len()),
        ] {
            if len != n {
                return Err(Error::dim(what, n, len));
            }
        }
        if let Some(i) = self.log_probs.iter().position(|l| !l.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite log-probability at step {i}"
            )));
        }
        Ok(())
    }
}

fn check_dims(env: &dyn Environment, policy: &Network, value: &Network) -> Result<()> {
    let n_obs = env.observation_size();
    if policy.n_inputs() != n_obs {
        return Err(Error::dim("policy head inputs", n_obs, policy.n_inputs()));
    }
    if value.n_inputs() != n_obs {
        return Err(Error::dim("value head inputs", n_obs, value.n_inputs()));
    }
    if policy.n_outputs() != env.action_count() {
        return Err(Error::dim(
            "policy head outputs",
            env.action_count(),
            policy.n_outputs(),
        ));
    }
    if value.n_outputs() != 1 {
        return Err(Error::dim("value head outputs", 1, value.n_outputs()));
    }
    Ok(())
}

/// Run the policy for `n_steps`, resetting the environment whenever an
/// episode ends. `tracker` holds the episode in progress across calls.
pub fn collect_rollout(
    env: &mut dyn Environment,
    policy: &Network,
    value: &Network,
    n_steps: usize,
    rng: &mut impl Rng,
    tracker: &mut EpisodeTracker,
    keep_supports: bool,
) -> Result<RolloutBuffer> {
    check_dims(env, policy, value)?;
    let mut buf = RolloutBuffer::default();
    let mut obs = env.observation();
    for _ in 0..n_steps {
        let (logits, peval) = policy.forward(&obs, None)?;
        let (v, veval) = value.forward(&obs, None)?;
        buf.policy_evaluations += 1;
        buf.value_evaluations += 1;
        let probs = action_distribution(&logits)?;
        let action = sample_categorical(&probs, rng);
        let logp = log_softmax(&logits)[action];
        if !logp.is_finite() || !v[0].is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite rollout output: log-prob {logp}, value {}",
                v[0]
            )));
        }
        let tr = env.step(action)?;
        tracker.reward += tr.reward;
        tracker.steps += 1;
        buf.observations.push(obs);
        buf.actions.push(action);
        buf.log_probs.push(logp);
        buf.rewards.push(tr.reward);
        buf.values.push(v[0]);
        buf.dones.push(tr.done);
        if keep_supports {
            buf.policy_supports.push(peval.support().cloned());
            buf.value_supports.push(veval.support().cloned());
        }
        obs = if tr.done {
            buf.episodes.push(EpisodeSummary {
                total_reward: tracker.reward,
                steps: tracker.steps,
                finished: Instant::now(),
            });
            *tracker = EpisodeTracker::default();
            env.reset()
        } else {
            tr.observation
        };
    }
    buf.bootstrap_value = value.forward(&obs, None)?.0[0];
    buf.value_evaluations += 1;
    Ok(buf)
}

/// Generalised advantage estimation, backwards over the buffer.
pub fn compute_gae(buf: &mut RolloutBuffer, gamma: f64, gae_lambda: f64, bootstrap_value: f64) {
    let n = buf.len();
    buf.advantages = vec![0.0; n];
    buf.returns = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if buf.dones[t] { 0.0 } else { 1.0 };
        let delta = buf.rewards[t] + gamma * next_value * live - buf.values[t];
        next_adv = delta + gamma * gae_lambda * live * next_adv;
        buf.advantages[t] = next_adv;
        buf.returns[t] = next_adv + buf.values[t];
        next_value = buf.values[t];
    }
}

/// Shift to mean 0 and scale to unit sample standard deviation. Slices of
/// length one are returned unchanged.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.len() < 2 {
        return adv.to_vec();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt() + 1e-8;
    adv.iter().map(|a| (a - mean) / std).collect()
}

/// Clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Separate Adam states for the two heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoOptimizer {
    pub policy: AdamState,
    pub value: AdamState,
}

impl PpoOptimizer {
    pub fn new(policy: &Network, value: &Network) -> Self {
        PpoOptimizer {
            policy: AdamState::new(policy.n_params()),
            value: AdamState::new(value.n_params()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub grad_norm: f64,
    pub n_minibatches: usize,
    pub policy_evaluations: u64,
    pub value_evaluations: u64,
}

/// Loss and gradients over one minibatch.
#[derive(Debug, Clone)]
pub struct MinibatchGrad {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub policy_grad: Vec<f64>,
    pub value_grad: Vec<f64>,
}

impl MinibatchGrad {
    pub fn total_loss(&self, cfg: &PpoConfig) -> f64 {
        self.policy_loss + cfg.value_coef * self.value_loss - cfg.entropy_coef * self.entropy
    }
}

struct SampleTerm {
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    log_ratio: f64,
    ratio: f64,
    clipped: bool,
    policy_grad: Vec<f64>,
    value_grad: Vec<f64>,
}

/// Loss and gradients of the PPO objective on the minibatch `idx`, with
/// `adv` the (already normalised) advantages in the same order. Per-sample
/// terms are evaluated in parallel and summed in index order.
pub fn minibatch_gradient(
    policy: &Network,
    value: &Network,
    buf: &RolloutBuffer,
    idx: &[usize],
    adv: &[f64],
    cfg: &PpoConfig,
) -> Result<MinibatchGrad> {
    if idx.is_empty() {
        return Err(Error::Empty("minibatch"));
    }
    if adv.len() != idx.len() {
        return Err(Error::dim("minibatch advantages", idx.len(), adv.len()));
    }
    if !buf.has_gae() {
        return Err(Error::InvalidParameter(
            "advantages have not been computed".into(),
        ));
    }
    let b = idx.len() as f64;
    let reuse = cfg.reuse_rollout_support && buf.policy_supports.len() == buf.len();
    let p_base = if reuse {
        None
    } else {
        policy.reserve_streams(idx.len() as u64)
    };
    let v_base = if reuse {
        None
    } else {
        value.reserve_streams(idx.len() as u64)
    };
    let eps = cfg.clip_epsilon;

    let terms = idx
        .par_iter()
        .enumerate()
        .map(|(k, &j)| -> Result<SampleTerm> {
            let obs = &buf.observations[j];
            let (logits, peval) = match (reuse, &buf.policy_supports.get(j)) {
                (true, Some(Some(s))) => policy.forward_on(obs, s.clone())?,
                _ => policy.forward(obs, p_base.map(|s| s + k as u64))?,
            };
            let (v, veval) = match (reuse, &buf.value_supports.get(j)) {
                (true, Some(Some(s))) => value.forward_on(obs, s.clone())?,
                _ => value.forward(obs, v_base.map(|s| s + k as u64))?,
            };
            let logp = log_softmax(&logits);
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let a = buf.actions[j];
            let log_ratio = logp[a] - buf.log_probs[j];
            let ratio = log_ratio.exp();
            let unclipped = ratio * adv[k];
            let clipped_obj = ratio.clamp(1.0 - eps, 1.0 + eps) * adv[k];
            let entropy = -probs
                .iter()
                .zip(&logp)
                .map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 })
                .sum::<f64>();

            // d(-surrogate/B)/d logp_a, zero where the clipped branch is active
            let d_logp_a = if unclipped <= clipped_obj {
                -unclipped / b
            } else {
                0.0
            };
            let d_logits: Vec<f64> = (0..logits.len())
                .map(|i| {
                    let ind = (i == a) as u8 as f64;
                    let surr = d_logp_a * (ind - probs[i]);
                    let ent = if probs[i] > 0.0 {
                        -probs[i] * (logp[i] + entropy)
                    } else {
                        0.0
                    };
                    surr - cfg.entropy_coef / b * ent
                })
                .collect();
            let mut policy_grad = vec![0.0; policy.n_params()];
            policy.backward(obs, &peval, &d_logits, &mut policy_grad)?;

            let err = v[0] - buf.returns[j];
            let mut value_grad = vec![0.0; value.n_params()];
            value.backward(
                obs,
                &veval,
                &[cfg.value_coef * 2.0 * err / b],
                &mut value_grad,
            )?;

            Ok(SampleTerm {
                policy_loss: -unclipped.min(clipped_obj),
                value_loss: err * err,
                entropy,
                log_ratio,
                ratio,
                clipped: (ratio - 1.0).abs() > eps,
                policy_grad,
                value_grad,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = MinibatchGrad {
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        approx_kl: 0.0,
        clip_fraction: 0.0,
        mean_ratio: 0.0,
        policy_grad: vec![0.0; policy.n_params()],
        value_grad: vec![0.0; value.n_params()],
    };
    for t in &terms {
        out.policy_loss += t.policy_loss / b;
        out.value_loss += t.value_loss / b;
        out.entropy += t.entropy / b;
        out.approx_kl += ((t.ratio - 1.0) - t.log_ratio) / b;
        out.clip_fraction += t.clipped as u8 as f64 / b;
        out.mean_ratio += t.ratio / b;
        for (g, x) in out.policy_grad.iter_mut().zip(&t.policy_grad) {
            *g += x;
        }
        for (g, x) in out.value_grad.iter_mut().zip(&t.value_grad) {
            *g += x;
        }
    }
    Ok(out)
}

/// Scale both gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(a: &mut [f64], b: &mut [f64], max_norm: f64) -> f64 {
    let norm = a.iter().chain(b.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        a.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= s);
    }
    norm
}

/// `n_epochs` passes of shuffled minibatch updates over the buffer.
pub fn ppo_update(
    policy: &mut Network,
    value: &mut Network,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    opt: &mut PpoOptimizer,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    cfg.validate()?;
    buf.check()?;
    if buf.is_empty() {
        return Err(Error::Empty("rollout buffer"));
    }
    if !buf.has_gae() {
        return Err(Error::InvalidParameter(
            "advantages have not been computed".into(),
        ));
    }
    let reuse = cfg.reuse_rollout_support && buf.policy_supports.len() == buf.len();
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..buf.len()).collect();
    for epoch in 0..cfg.n_epochs {
        order.shuffle(rng);
        for (mb, idx) in order.chunks(cfg.minibatch_size).enumerate() {
            let raw: Vec<f64> = idx.iter().map(|&j| buf.advantages[j]).collect();
            let adv = if cfg.normalize_advantages {
                normalize_advantages(&raw)
            } else {
                raw
            };
            let mut g = minibatch_gradient(policy, value, buf, idx, &adv, cfg)?;
            let loss = g.total_loss(cfg);
            let grads_ok = g
                .policy_grad
                .iter()
                .chain(&g.value_grad)
                .all(|x| x.is_finite());
            if !loss.is_finite() || !grads_ok {
                return Err(Error::Numerical(format!(
                    "epoch {epoch} minibatch {mb}: policy loss {}, value loss {}, entropy {}, mean ratio {}, finite gradients {grads_ok}",
                    g.policy_loss, g.value_loss, g.entropy, g.mean_ratio
                )));
            }
            if !reuse {
                let n = idx.len() as u64;
                stats.policy_evaluations += n;
                stats.value_evaluations += n;
            }
            let norm = clip_global_norm(&mut g.policy_grad, &mut g.value_grad, cfg.max_grad_norm);

            let mut p = policy.params();
            adam_step(
                &mut p,
                &g.policy_grad,
                &mut opt.policy,
                cfg.learning_rate_for(policy),
            )?;
            policy.set_params(&p)?;
            let mut p = value.params();
            adam_step(
                &mut p,
                &g.value_grad,
                &mut opt.value,
                cfg.learning_rate_for(value),
            )?;
            value.set_params(&p)?;

            stats.policy_loss += g.policy_loss;
            stats.value_loss += g.value_loss;
            stats.entropy += g.entropy;
            stats.approx_kl += g.approx_kl;
            stats.clip_fraction += g.clip_fraction;
            stats.mean_ratio += g.mean_ratio;
            stats.grad_norm += norm;
            stats.n_minibatches += 1;
        }
    }
    let n = stats.n_minibatches as f64;
    for x in [
        &mut stats.policy_loss,
        &mut stats.value_loss,
        &mut stats.entropy,
        &mut stats.approx_kl,
        &mut stats.clip_fraction,
        &mut stats.mean_ratio,
        &mut stats.grad_norm,
    ] {
        *x /= n;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cyber_env::{CyberEnv, NetworkSpec};
    use crate::energy_model::{init_weights, DbmTopology};
    use crate::sampler::{Backend, SamplerConfig};
    use proptest::prelude::{prop, prop_assert, prop_assume, proptest};

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], tol: f64) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            assert!(err < tol, "param {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn mlp_zero_weights_give_zero_output() {
        let h = MlpHead::zeros(vec![5, 64, 64, 3], Activation::Tanh).unwrap();
        assert_eq!(
            mlp_forward(&h, &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut h = MlpHead::zeros(vec![2, 2], Activation::Linear).unwrap();
        h.set_params(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        assert_eq!(
            mlp_forward(&h, &[1.0, -1.0]).unwrap(),
            vec![-1.0 + 0.5, -1.0 - 0.5]
        );
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Linear] {
            let head = MlpHead::init(vec![4, 6, 5, 3], act, 1.0, 11).unwrap();
            let x = [0.3, -1.0, 1.0, 0.5];
            let c = [0.7, -1.3, 0.4];
            let loss = |p: &[f64]| {
                let mut h = head.clone();
                h.set_params(p).unwrap();
                let y = mlp_forward(&h, &x).unwrap();
                y.iter().zip(&c).map(|(y, c)| c * y * y).sum::<f64>()
            };
            let trace = mlp_forward_trace(&head, &x).unwrap();
            let y = trace.last().unwrap();
            let d_out: Vec<f64> = y.iter().zip(&c).map(|(y, c)| 2.0 * c * y).collect();
            let mut grad = vec![0.0; head.params().len()];
            mlp_backward(&head, &trace, &d_out, &mut grad).unwrap();
            fd_check(loss, head.params(), &grad, 1e-5);
        }
    }

    #[test]
    fn mlp_dimension_errors() {
        let h = MlpHead::zeros(vec![3, 2], Activation::Tanh).unwrap();
        assert!(mlp_forward(&h, &[1.0]).is_err());
        assert!(MlpHead::zeros(vec![3], Activation::Tanh).is_err());
        assert!(MlpHead::zeros(vec![3, 0, 1], Activation::Tanh).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_constant_gradient_steps_lr_sign() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let lr = 1e-3;
        let mut before = p.clone();
        for _ in 0..2000 {
            before = p.clone();
            adam_step(&mut p, &[2.5, -0.01], &mut s, lr).unwrap();
        }
        assert!(((before[0] - p[0]) - lr).abs() < 1e-6 * lr.max(1.0));
        assert!(((before[1] - p[1]) + lr).abs() < 1e-4 * lr.max(1.0) + 1e-9);
    }

    #[test]
    fn adam_matches_reference_recurrence_on_quadratic() {
        // f(x) = sum c_i x_i^2
        let c = [1.0, 3.0, 0.5];
        let lr = 0.05;
        let mut p = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::new(3);
        let (mut x, mut m, mut v) = (p.clone(), [0.0; 3], [0.0; 3]);
        for t in 1..=5 {
            let g: Vec<f64> = p.iter().zip(&c).map(|(x, c)| 2.0 * c * x).collect();
            adam_step(&mut p, &g, &mut s, lr).unwrap();
            for i in 0..3 {
                let gi = 2.0 * c[i] * x[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..3 {
            assert!((p[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut s, 0.1).is_err());
    }

    fn buffer_from(rewards: &[f64], values: &[f64], dones: &[bool]) -> RolloutBuffer {
        let n = rewards.len();
        RolloutBuffer {
            observations: vec![vec![0]; n],
            actions: vec![0; n],
            log_probs: vec![0.0; n],
            rewards: rewards.to_vec(),
            values: values.to_vec(),
            dones: dones.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn gae_gamma_zero_is_reward_minus_value() {
        let mut b = buffer_from(&[1.0, 2.0, -1.0], &[0.5, 0.1, 0.3], &[false, true, false]);
        compute_gae(&mut b, 0.0, 0.95, 9.0);
        assert_eq!(b.advantages, vec![0.5, 1.9, -1.3]);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [1.0, 2.0, -1.0, 0.5];
        let v = [0.5, 0.1, 0.3, 0.2];
        let d = [false, true, false, false];
        let mut b = buffer_from(&r, &v, &d);
        compute_gae(&mut b, 0.9, 0.0, 2.0);
        let next = [v[1], v[2], v[3], 2.0];
        for t in 0..4 {
            let live = if d[t] { 0.0 } else { 1.0 };
            assert!((b.advantages[t] - (r[t] + 0.9 * next[t] * live - v[t])).abs() < 1e-15);
        }
    }

    /// A_t as an explicit discounted sum of TD errors, cut at episode ends.
    fn naive_gae(r: &[f64], v: &[f64], d: &[bool], gamma: f64, lam: f64, boot: f64) -> Vec<f64> {
        let n = r.len();
        let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + gamma * next_v(t) * if d[t] { 0.0 } else { 1.0 } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    sum += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= gamma * lam;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let r: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d: Vec<bool> = (0..10).map(|_| rng.gen_bool(0.2)).collect();
            let boot = rng.gen_range(-1.0..1.0);
            let mut b = buffer_from(&r, &v, &d);
            compute_gae(&mut b, 0.99, 0.95, boot);
            let want = naive_gae(&r, &v, &d, 0.99, 0.95, boot);
            for t in 0..10 {
                assert!((b.advantages[t] - want[t]).abs() < 1e-12);
                assert!((b.returns[t] - want[t] - v[t]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn normalized_advantages_are_standard(xs in prop::collection::vec(-100.0f64..100.0, 2..64)) {
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let z = normalize_advantages(&xs);
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let std = (z.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            prop_assert!(mean.abs() < 1e-8);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }

        #[test]
        fn surrogate_never_exceeds_unclipped(r in 0.0f64..5.0, a in -10.0f64..10.0, eps in 0.01f64..0.99) {
            prop_assert!(clipped_surrogate(r, a, eps) <= r * a + 1e-12);
        }
    }

    #[test]
    fn identity_ratio_makes_clip_irrelevant() {
        for a in [-2.0, 0.0, 3.0] {
            assert_eq!(clipped_surrogate(1.0, a, 0.2), a);
        }
    }

    /// Single-step environment with a fixed observation.
    struct Bandit {
        n_actions: usize,
        t: usize,
        len: usize,
        reward_of: fn(usize) -> f64,
    }

    impl Environment for Bandit {
        fn observation_size(&self) -> usize {
            2
        }
        fn action_count(&self) -> usize {
            self.n_actions
        }
        fn observation(&self) -> Vec<u8> {
            vec![1, 0]
        }
        fn reset(&mut self) -> Vec<u8> {
            self.t = 0;
            self.observation()
        }
        fn step(&mut self, action: usize) -> Result<Transition> {
            if action >= self.n_actions {
                return Err(Error::InvalidAction {
                    index: action,
                    size: self.n_actions,
                });
            }
            self.t += 1;
            Ok(Transition {
                observation: self.observation(),
                reward: (self.reward_of)(action),
                done: self.t >= self.len,
            })
        }
    }

    fn mlp_pair(n_obs: usize, n_act: usize, seed: u64) -> (Network, Network) {
        (
            Network::Mlp(MlpHead::standard(n_obs, n_act, 0.01, seed).unwrap()),
            Network::Mlp(MlpHead::standard(n_obs, 1, 1.0, seed + 1).unwrap()),
        )
    }

    #[test]
    fn single_action_env_always_picks_zero() {
        let mut env = Bandit {
            n_actions: 1,
            t: 0,
            len: 3,
            reward_of: |_| 1.0,
        };
        let (p, v) = mlp_pair(2, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tr = EpisodeTracker::default();
        let b = collect_rollout(&mut env, &p, &v, 10, &mut rng, &mut tr, false).unwrap();
        assert_eq!(b.len(), 10);
        assert!(b.actions.iter().all(|&a| a == 0));
        assert_eq!(b.episodes.len(), 3);
        assert_eq!(tr.steps, 1);
    }

    #[test]
    fn rollout_is_deterministic() {
        let run = || {
            let mut env = CyberEnv::new(NetworkSpec::default_six_node(), 5).unwrap();
            let (p, v) = mlp_pair(env.observation_size(), env.action_count(), 3);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tr = EpisodeTracker::default();
            let b = collect_rollout(&mut env, &p, &v, 70, &mut rng, &mut tr, false).unwrap();
            (b.actions, b.rewards, b.log_probs)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rollout_rewards_match_env_accounting() {
        let mut env = CyberEnv::new(NetworkSpec::default_six_node(), 1).unwrap();
        let (p, v) = mlp_pair(env.observation_size(), env.action_count(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tr = EpisodeTracker::default();
        let before = env.total_reward();
        let b = collect_rollout(&mut env, &p, &v, 75, &mut rng, &mut tr, false).unwrap();
        let sum: f64 = b.rewards.iter().sum();
        assert!((sum - (env.total_reward() - before)).abs() < 1e-9);
        assert_eq!(b.episodes.len(), 2);
        assert!((tr.reward - env.episode_reward()).abs() < 1e-9);
    }

    #[test]
    fn rollout_rejects_mismatched_heads() {
        let mut env = CyberEnv::new(NetworkSpec::default_six_node(), 1).unwrap();
        let (p, v) = mlp_pair(3, env.action_count(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tr = EpisodeTracker::default();
        assert!(collect_rollout(&mut env, &p, &v, 5, &mut rng, &mut tr, false).is_err());
    }

    fn bandit_buffer(p: &Network, v: &Network, seed: u64) -> RolloutBuffer {
        let mut env = Bandit {
            n_actions: 3,
            t: 0,
            len: 4,
            reward_of: |a| a as f64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tr = EpisodeTracker::default();
        let mut b = collect_rollout(&mut env, p, v, 16, &mut rng, &mut tr, true).unwrap();
        let boot = b.bootstrap_value;
        compute_gae(&mut b, 0.9, 0.95, boot);
        b
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let (mut p, mut v) = mlp_pair(2, 3, 1);
        let mut b = bandit_buffer(&p, &v, 0);
        b.advantages = vec![0.0; b.len()];
        let before = p.params();
        let v_before = v.params();
        let cfg = PpoConfig {
            n_epochs: 2,
            minibatch_size: 8,
            ..Default::default()
        };
        let mut opt = PpoOptimizer::new(&p, &v);
        let stats = ppo_update(
            &mut p,
            &mut v,
            &b,
            &cfg,
            &mut opt,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(p.params(), before);
        assert_ne!(v.params(), v_before);
        assert_eq!(stats.policy_loss, 0.0);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        // tiny linear policy: a single layer from the observation to logits
        let head = MlpHead::init(vec![2, 3], Activation::Linear, 1.0, 7).unwrap();
        let (p0, v) = (
            Network::Mlp(head),
            Network::Mlp(MlpHead::standard(2, 1, 1.0, 2).unwrap()),
        );
        let b = bandit_buffer(&p0, &v, 4);
        let idx: Vec<usize> = (0..b.len()).collect();
        let adv = normalize_advantages(&b.advantages);
        let cfg = PpoConfig::default();
        // move slightly off the rollout policy, staying inside the clip band
        let mut p = p0.clone();
        let x: Vec<f64> = p
            .params()
            .iter()
            .enumerate()
            .map(|(i, x)| x + 0.01 * (i as f64 - 2.0))
            .collect();
        p.set_params(&x).unwrap();
        let g = minibatch_gradient(&p, &v, &b, &idx, &adv, &cfg).unwrap();
        assert!(g.clip_fraction == 0.0 && (g.mean_ratio - 1.0).abs() > 1e-6);
        let loss = |q: &[f64]| {
            let mut pq = p.clone();
            pq.set_params(q).unwrap();
            minibatch_gradient(&pq, &v, &b, &idx, &adv, &cfg)
                .unwrap()
                .policy_loss
        };
        fd_check(loss, &x, &g.policy_grad, 1e-6);
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let (p, v) = mlp_pair(2, 3, 5);
        let b = bandit_buffer(&p, &v, 4);
        let idx: Vec<usize> = (0..b.len()).collect();
        let adv = normalize_advantages(&b.advantages);
        let cfg = PpoConfig::default();
        let g = minibatch_gradient(&p, &v, &b, &idx, &adv, &cfg).unwrap();
        let x = v.params();
        let loss = |q: &[f64]| {
            let mut vq = v.clone();
            vq.set_params(q).unwrap();
            cfg.value_coef
                * minibatch_gradient(&p, &vq, &b, &idx, &adv, &cfg)
                    .unwrap()
                    .value_loss
        };
        fd_check(loss, &x, &g.value_grad, 1e-5);
    }

    fn dbm_policy(n_obs: usize, n_act: usize, backend: Backend, seed: u64) -> Network {
        let topo = DbmTopology::new(n_obs, vec![3, 2], n_act).unwrap();
        let w = init_weights(&topo, seed, 0.5).unwrap();
        Network::Dbm(
            FreeEnergyHead::new(
                topo,
                w,
                backend,
                SamplerConfig::default(),
                HeadKind::Policy { n_actions: n_act },
            )
            .unwrap(),
        )
    }

    fn dbm_value(n_obs: usize, backend: Backend, seed: u64) -> Network {
        let topo = DbmTopology::new(n_obs, vec![3, 2], 0).unwrap();
        let w = init_weights(&topo, seed, 0.5).unwrap();
        Network::Dbm(
            FreeEnergyHead::new(topo, w, backend, SamplerConfig::default(), HeadKind::Value)
                .unwrap(),
        )
    }

    #[test]
    fn dbm_heads_backpropagate_through_free_energy() {
        let p = dbm_policy(2, 3, Backend::Exact, 1);
        let v = dbm_value(2, Backend::Exact, 2);
        let b = bandit_buffer(&p, &v, 4);
        let idx: Vec<usize> = (0..b.len()).collect();
        let adv = normalize_advantages(&b.advantages);
        let cfg = PpoConfig::default();
        let mut p1 = p.clone();
        let x: Vec<f64> = p.params().iter().map(|x| x * 1.01).collect();
        p1.set_params(&x).unwrap();
        let g = minibatch_gradient(&p1, &v, &b, &idx, &adv, &cfg).unwrap();
        let loss = |q: &[f64]| {
            let mut pq = p1.clone();
            pq.set_params(q).unwrap();
            minibatch_gradient(&pq, &v, &b, &idx, &adv, &cfg)
                .unwrap()
                .policy_loss
        };
        fd_check(loss, &x, &g.policy_grad, 1e-5);
        let xv = v.params();
        let vloss = |q: &[f64]| {
            let mut vq = v.clone();
            vq.set_params(q).unwrap();
            cfg.value_coef
                * minibatch_gradient(&p1, &vq, &b, &idx, &adv, &cfg)
                    .unwrap()
                    .value_loss
        };
        fd_check(vloss, &xv, &g.value_grad, 1e-5);
    }

    #[test]
    fn all_four_head_combinations_train() {
        for (pd, vd) in [(false, false), (true, false), (false, true), (true, true)] {
            let p = if pd {
                dbm_policy(2, 3, Backend::Exact, 1)
            } else {
                mlp_pair(2, 3, 1).0
            };
            let v = if vd {
                dbm_value(2, Backend::Exact, 2)
            } else {
                mlp_pair(2, 3, 1).1
            };
            let (mut p, mut v) = (p, v);
            let b = bandit_buffer(&p, &v, 0);
            let (p0, v0) = (p.params(), v.params());
            let cfg = PpoConfig {
                n_epochs: 2,
                minibatch_size: 8,
                ..Default::default()
            };
            let mut opt = PpoOptimizer::new(&p, &v);
            let s = ppo_update(
                &mut p,
                &mut v,
                &b,
                &cfg,
                &mut opt,
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
            assert_ne!(p.params(), p0);
            assert_ne!(v.params(), v0);
            assert!(s.mean_ratio.is_finite());
            assert_eq!(s.n_minibatches, 4);
            assert_eq!(s.policy_evaluations, 32);
        }
    }

    #[test]
    fn sampled_dbm_update_is_deterministic_and_counts_calls() {
        let run = |reuse: bool| {
            let mut p = dbm_policy(2, 3, Backend::Gibbs, 1);
            let mut v = dbm_value(2, Backend::Anneal, 2);
            let b = bandit_buffer(&p, &v, 0);
            let calls0 = p.sampler_calls();
            let cfg = PpoConfig {
                n_epochs: 2,
                minibatch_size: 8,
                reuse_rollout_support: reuse,
                ..Default::default()
            };
            let mut opt = PpoOptimizer::new(&p, &v);
            let s = ppo_update(
                &mut p,
                &mut v,
                &b,
                &cfg,
                &mut opt,
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
            assert_eq!(p.sampler_calls() - calls0, s.policy_evaluations);
            (p.params(), v.params())
        };
        assert_eq!(run(false), run(false));
        assert_eq!(run(true), run(true));
    }

    #[test]
    fn bandit_policy_learns_best_arm() {
        let (mut p, mut v) = mlp_pair(2, 3, 1);
        let cfg = PpoConfig {
            learning_rate: 3e-3,
            n_steps: 64,
            minibatch_size: 16,
            ..Default::default()
        };
        let mut env = Bandit {
            n_actions: 3,
            t: 0,
            len: 1,
            reward_of: |a| if a == 2 { 1.0 } else { 0.0 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tr = EpisodeTracker::default();
        let mut opt = PpoOptimizer::new(&p, &v);
        for _ in 0..20 {
            let mut b =
                collect_rollout(&mut env, &p, &v, cfg.n_steps, &mut rng, &mut tr, false).unwrap();
            let boot = b.bootstrap_value;
            compute_gae(&mut b, cfg.gamma, cfg.gae_lambda, boot);
            ppo_update(&mut p, &mut v, &b, &cfg, &mut opt, &mut rng).unwrap();
        }
        let probs = action_distribution(&p.forward(&[1, 0], None).unwrap().0).unwrap();
        assert!(probs[2] > 0.9, "{probs:?}");
    }

    #[test]
    fn dbm_heads_use_their_own_learning_rate() {
        let (mut p, _) = mlp_pair(2, 3, 1);
        let mut v = dbm_value(2, Backend::Exact, 2);
        let b = bandit_buffer(&p, &v, 0);
        let cfg = PpoConfig {
            learning_rate: 1e-3,
            dbm_learning_rate: Some(5e-2),
            n_epochs: 1,
            minibatch_size: b.len(),
            ..Default::default()
        };
        let (p0, v0) = (p.params(), v.params());
        let mut opt = PpoOptimizer::new(&p, &v);
        ppo_update(
            &mut p,
            &mut v,
            &b,
            &cfg,
            &mut opt,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        // a first Adam step moves every parameter with a non-tiny gradient by lr
        let max_step = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let (dp, dv) = (max_step(&p.params(), &p0), max_step(&v.params(), &v0));
        assert!(dp <= 1e-3 * (1.0 + 1e-9) && dp > 0.99e-3, "{dp}");
        assert!(dv <= 5e-2 * (1.0 + 1e-9) && dv > 0.99 * 5e-2, "{dv}");
        assert!(PpoConfig {
            dbm_learning_rate: Some(-1.0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn nan_parameters_abort_update() {
        let (mut p, mut v) = mlp_pair(2, 3, 1);
        let b = bandit_buffer(&p, &v, 0);
        let mut x = v.params();
        x[0] = f64::NAN;
        v.set_params(&x).unwrap();
        let mut opt = PpoOptimizer::new(&p, &v);
        let err = ppo_update(
            &mut p,
            &mut v,
            &b,
            &PpoConfig::default(),
            &mut opt,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        for bad in [
            PpoConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            PpoConfig {
                clip_epsilon: 1.0,
                ..Default::default()
            },
            PpoConfig {
                gamma: 1.5,
                ..Default::default()
            },
            PpoConfig {
                gae_lambda: -0.1,
                ..Default::default()
            },
            PpoConfig {
                minibatch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn network_state_round_trips() {
        let p = dbm_policy(2, 3, Backend::Gibbs, 1);
        let _ = p.forward(&[1, 0], None).unwrap();
        let q = Network::from_state(
            serde_json::from_str(&serde_json::to_string(&p.state()).unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(q.state(), p.state());
        let m = mlp_pair(2, 3, 1).0;
        let m2 = Network::from_state(
            serde_json::from_str(&serde_json::to_string(&m.state()).unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(m2.params(), m.params());
    }
}
