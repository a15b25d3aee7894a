//! Experiment runner: configuration, training loop, run directories,
//! checkpoints, moving averages, plateau detection and the cross-variant
//! comparison report.
//!
//! A run directory holds `config.toml` (resolved, self-contained),
//! `episodes.csv`, `updates.csv`, `checkpoint.json`, `metadata.json` and,
//! when tracing, `trace.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cyber_env::{BlueAction, CyberEnv, EnvSnapshot, NetworkSpec, TraceWriter};
use crate::energy_model::{init_weights, DbmTopology, DEFAULT_BETA, DEFAULT_INIT_SCALE};
use crate::free_energy::{FreeEnergyHead, HeadKind};
use crate::ppo::{
    collect_rollout, compute_gae, ppo_update, Activation, Environment, EpisodeTracker, MlpHead,
    Network, NetworkState, PpoConfig, PpoOptimizer, Transition, UpdateStats,
};
use crate::sampler::{Backend, SamplerConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "boltzppo-checkpoint";
pub const METADATA_FORMAT: &str = "boltzppo-run";
pub const FORMAT_VERSION: u32 = 1;
pub const BASELINE_VARIANT: &str = "mlp-mlp";
pub const EPISODE_COLUMNS: [&str; 5] =
    ["episode", "total_reward", "steps", "ma5_reward", "wall_ms"];
pub const UPDATE_COLUMNS: [&str; 15] = [
    "update",
    "episodes_done",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "mean_ratio",
    "grad_norm",
    "policy_sampler_calls",
    "value_sampler_calls",
    "policy_evaluations",
    "value_evaluations",
    "steps",
    "wall_ms",
];

/// Where the network spec comes from. Exactly one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// `six_node` or `six_node_deterministic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// TOML network spec, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<NetworkSpec>,
}

impl EnvConfig {
    pub fn preset(name: &str) -> Self {
        EnvConfig {
            preset: Some(name.into()),
            ..Default::default()
        }
    }

    pub fn resolve_spec(&self, base_dir: &Path) -> Result<NetworkSpec> {
        let set = [
            self.preset.is_some(),
            self.spec_file.is_some(),
            self.spec.is_some(),
        ];
        if set.iter().filter(|x| **x).count() != 1 {
            return Err(Error::Config(
                "env: set exactly one of `preset`, `spec_file` or `spec`".into(),
            ));
        }
        let spec = if let Some(p) = &self.preset {
            match p.as_str() {
                "six_node" => NetworkSpec::default_six_node(),
                "six_node_deterministic" => NetworkSpec::default_deterministic(),
                other => return Err(Error::Config(format!(
                    "env: unknown preset `{other}` (expected six_node or six_node_deterministic)"
                ))),
            }
        } else if let Some(f) = &self.spec_file {
            let path = base_dir.join(f);
            let text = fs::read_to_string(&path).map_err(|e| {
                Error::Config(format!(
                    "env: cannot read spec file {}: {e}",
                    path.display()
                ))
            })?;
            toml::from_str(&text)?
        } else {
            self.spec.clone().unwrap()
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn default_mlp_hidden() -> Vec<usize> {
    crate::ppo::DEFAULT_HIDDEN.to_vec()
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_dbm_hidden() -> Vec<usize> {
    vec![8, 8]
}

fn default_init_scale() -> f64 {
    DEFAULT_INIT_SCALE
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_backend() -> Backend {
    Backend::Exact
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadConfig {
    Mlp {
        #[serde(default = "default_mlp_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
    Dbm {
        #[serde(default = "default_dbm_hidden")]
        hidden_layers: Vec<usize>,
        #[serde(default = "default_backend")]
        backend: Backend,
        #[serde(default)]
        sampler: SamplerConfig,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

impl HeadConfig {
    pub fn mlp() -> Self {
        HeadConfig::Mlp {
            hidden: default_mlp_hidden(),
            activation: default_activation(),
        }
    }

    pub fn dbm(hidden_layers: Vec<usize>, backend: Backend) -> Self {
        HeadConfig::Dbm {
            hidden_layers,
            backend,
            sampler: SamplerConfig::default(),
            init_scale: DEFAULT_INIT_SCALE,
            beta: DEFAULT_BETA,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            HeadConfig::Mlp { .. } => "mlp",
            HeadConfig::Dbm { .. } => "dbm",
        }
    }

    fn validate(&self, which: &str) -> Result<()> {
        match self {
            HeadConfig::Mlp { hidden, .. } => {
                if hidden.contains(&0) {
                    return Err(Error::Config(format!(
                        "{which}: MLP hidden sizes must be positive"
                    )));
                }
            }
            HeadConfig::Dbm {
                hidden_layers,
                backend,
                sampler,
                init_scale,
                beta,
            } => {
                if hidden_layers.is_empty() || hidden_layers.contains(&0) {
                    return Err(Error::Config(format!(
                        "{which}: DBM needs at least one non-empty hidden layer"
                    )));
                }
                let n_hidden: usize = hidden_layers.iter().sum();
                if *backend == Backend::Exact && n_hidden > sampler.exact_cap {
                    return Err(Error::Config(format!(
                        "{which}: {n_hidden} hidden units exceed the exact-backend cap of {}",
                        sampler.exact_cap
                    )));
                }
                if !(*init_scale > 0.0 && init_scale.is_finite()) {
                    return Err(Error::Config(format!("{which}: init_scale must be > 0")));
                }
                if !(*beta > 0.0 && beta.is_finite()) {
                    return Err(Error::Config(format!("{which}: beta must be > 0")));
                }
                sampler
                    .validate()
                    .map_err(|e| Error::Config(format!("{which}.sampler: {e}")))?;
            }
        }
        Ok(())
    }

    /// Build the head. `n_out` is 1 for a value head, else the action count.
    fn build(
        &self,
        n_obs: usize,
        n_out: usize,
        policy: bool,
        seed: u64,
        sampler_seed: u64,
    ) -> Result<Network> {
        match self {
            HeadConfig::Mlp { hidden, activation } => {
                let mut sizes = vec![n_obs];
                sizes.extend(hidden);
                sizes.push(n_out);
                let gain = if policy { 0.01 } else { 1.0 };
                Ok(Network::Mlp(MlpHead::init(sizes, *activation, gain, seed)?))
            }
            HeadConfig::Dbm {
                hidden_layers,
                backend,
                sampler,
                init_scale,
                beta,
            } => {
                let n_action = if policy { n_out } else { 0 };
                let topo = DbmTopology::new(n_obs, hidden_layers.clone(), n_action)?;
                let mut w = init_weights(&topo, seed, *init_scale)?;
                w.beta = *beta;
                let mut sampler = sampler.clone();
                sampler.rng_seed = sampler.rng_seed.wrapping_add(sampler_seed);
                let kind = if policy {
                    HeadKind::Policy { n_actions: n_out }
                } else {
                    HeadKind::Value
                };
                Ok(Network::Dbm(FreeEnergyHead::new(
                    topo, w, *backend, sampler, kind,
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub window: usize,
    pub tolerance_frac: f64,
    pub hold: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            window: 5,
            tolerance_frac: 0.05,
            hold: 5,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    pub policy: HeadConfig,
    pub value: HeadConfig,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub plateau: PlateauConfig,
    /// Write real per-episode wall times; when false the column is 0 so
    /// repeated runs give byte-identical files.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
    /// Write a checkpoint every this many updates (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub trace: bool,
}

impl ExperimentConfig {
    /// MLP/MLP on the given preset.
    pub fn baseline(
        preset: &str,
        episodes: usize,
        seeds: Vec<u64>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        ExperimentConfig {
            env: EnvConfig::preset(preset),
            ppo: PpoConfig::default(),
            policy: HeadConfig::mlp(),
            value: HeadConfig::mlp(),
            episodes,
            seeds,
            output_dir: output_dir.into(),
            plateau: PlateauConfig::default(),
            record_wall_time: true,
            checkpoint_every: 0,
            trace: false,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Parse a config file and inline its network spec so the result no
    /// longer depends on the file's location.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_env(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_env(&mut self, base_dir: &Path) -> Result<()> {
        let spec = self.env.resolve_spec(base_dir)?;
        if self.env.preset.is_none() {
            self.env = EnvConfig {
                spec: Some(spec),
                ..Default::default()
            };
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.resolve_spec(Path::new("."))?;
        self.ppo.validate()?;
        self.policy.validate("policy")?;
        self.value.validate("value")?;
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let p = &self.plateau;
        if p.window == 0 || p.hold == 0 || p.tolerance_frac.is_nan() || p.tolerance_frac < 0.0 {
            return Err(Error::Config(
                "plateau: window and hold must be >= 1, tolerance >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// `policy-value`, e.g. `dbm-mlp` for a DBM policy with an MLP value head.
    pub fn variant_name(&self) -> String {
        format!("{}-{}", self.policy.short_name(), self.value.short_name())
    }

    /// Switch every DBM head to `backend`.
    pub fn set_backend(&mut self, b: Backend) {
        for h in [&mut self.policy, &mut self.value] {
            if let HeadConfig::Dbm { backend, .. } = h {
                *backend = b;
            }
        }
    }

    /// The four policy/value combinations. DBM heads copy the first DBM
    /// head found in this config (policy first), or (8, 8) exact if none;
    /// MLP heads likewise copy the first MLP head or the default.
    pub fn four_variants(&self) -> Vec<ExperimentConfig> {
        let pick = |want: &str, fallback: HeadConfig| {
            [&self.policy, &self.value]
                .into_iter()
                .find(|h| h.short_name() == want)
                .cloned()
                .unwrap_or(fallback)
        };
        let dbm = pick("dbm", HeadConfig::dbm(default_dbm_hidden(), Backend::Exact));
        let mlp = pick("mlp", HeadConfig::mlp());
        [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(pd, vd)| {
                let mut c = self.clone();
                c.policy = if pd { dbm.clone() } else { mlp.clone() };
                c.value = if vd { dbm.clone() } else { mlp.clone() };
                c
            })
            .collect()
    }
}

fn mix(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser over (seed, tag)
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub total_reward: f64,
    pub steps: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub update: usize,
    pub episodes_done: usize,
    pub stats: UpdateStats,
    pub policy_sampler_calls: u64,
    pub value_sampler_calls: u64,
    pub policy_evaluations: u64,
    pub value_evaluations: u64,
    pub steps: usize,
    pub wall_ms: u64,
}

impl UpdateRow {
    fn record(&self) -> Vec<String> {
        let s = &self.stats;
        vec![
            self.update.to_string(),
            self.episodes_done.to_string(),
            s.policy_loss.to_string(),
            s.value_loss.to_string(),
            s.entropy.to_string(),
            s.approx_kl.to_string(),
            s.clip_fraction.to_string(),
            s.mean_ratio.to_string(),
            s.grad_norm.to_string(),
            self.policy_sampler_calls.to_string(),
            self.value_sampler_calls.to_string(),
            self.policy_evaluations.to_string(),
            self.value_evaluations.to_string(),
            self.steps.to_string(),
            self.wall_ms.to_string(),
        ]
    }
}

/// Trailing mean over `window`; the first `window - 1` points are omitted.
pub fn moving_average(xs: &[f64], window: usize) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Empty("reward series"));
    }
    if window == 0 {
        return Err(Error::InvalidParameter(
            "moving-average window must be >= 1".into(),
        ));
    }
    if xs.len() < window {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(xs.len() + 1 - window);
    let mut sum: f64 = xs[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    Ok(out)
}

/// Index of the first point from which the series stays within
/// `tolerance_frac * |level|` of `level`, the mean of the last `hold` points.
pub fn plateau_episode(ma: &[f64], tolerance_frac: f64, hold: usize) -> Option<usize> {
    if ma.is_empty() {
        return None;
    }
    let h = hold.clamp(1, ma.len());
    let level = ma[ma.len() - h..].iter().sum::<f64>() / h as f64;
    let band = tolerance_frac * level.abs();
    let mut first = None;
    for (i, x) in ma.iter().enumerate().rev() {
        if (x - level).abs() <= band {
            first = Some(i);
        } else {
            break;
        }
    }
    first
}

/// Metrics of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: String,
    pub seed: u64,
    pub episodes: Vec<EpisodeRow>,
    pub updates: Vec<UpdateRow>,
    /// Moving average, aligned so `ma[i]` ends at episode `i + window`.
    pub moving_average: Vec<f64>,
    /// 1-based episode at which the plateau starts.
    pub plateau_episode: Option<usize>,
    pub final_level: Option<f64>,
    pub aborted: Option<String>,
}

impl RunMetrics {
    pub fn rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.total_reward).collect()
    }

    fn finish(&mut self, p: &PlateauConfig) {
        let rewards = self.rewards();
        self.moving_average = if rewards.is_empty() {
            Vec::new()
        } else {
            moving_average(&rewards, p.window).unwrap_or_default()
        };
        self.plateau_episode =
            plateau_episode(&self.moving_average, p.tolerance_frac, p.hold).map(|i| i + p.window);
        self.final_level = final_level(&self.moving_average, p.hold);
    }
}

fn final_level(ma: &[f64], hold: usize) -> Option<f64> {
    if ma.is_empty() {
        return None;
    }
    let h = hold.clamp(1, ma.len());
    Some(ma[ma.len() - h..].iter().sum::<f64>() / h as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metadata {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub variant: String,
    pub seed: u64,
    pub episodes_configured: usize,
    pub episodes_completed: usize,
    pub updates: usize,
    pub plateau_episode: Option<usize>,
    pub final_level: Option<f64>,
    pub aborted: Option<String>,
    pub wall_time_recorded: bool,
}

/// Serialized training state; resuming from it continues the run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub policy: NetworkState,
    pub value: NetworkState,
    pub optimizer: PpoOptimizer,
    pub rng: ChaCha8Rng,
    pub env: EnvSnapshot,
    pub tracker: EpisodeTracker,
    pub episodes: Vec<EpisodeRow>,
    pub updates: Vec<UpdateRow>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut f, self)?;
            f.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        if c.format != CHECKPOINT_FORMAT || c.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {} v{}",
                c.format, c.version
            )));
        }
        Ok(c)
    }
}

/// Environment wrapper that writes each step to a trace file.
struct Traced<'a, W: Write> {
    env: &'a mut CyberEnv,
    trace: Option<&'a mut TraceWriter<W>>,
}

impl<W: Write> Environment for Traced<'_, W> {
    fn observation_size(&self) -> usize {
        self.env.observation_size()
    }

    fn action_count(&self) -> usize {
        self.env.action_count()
    }

    fn observation(&self) -> Vec<u8> {
        self.env.observation()
    }

    fn reset(&mut self) -> Vec<u8> {
        self.env.reset()
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        let tr = self.env.step(action)?;
        if let Some(t) = self.trace.as_deref_mut() {
            t.record(
                self.env,
                BlueAction::decode(action, self.env.spec())?,
                tr.reward,
            )?;
        }
        Ok(tr)
    }
}

/// Training state for one (variant, seed).
pub struct Trainer {
    cfg: ExperimentConfig,
    seed: u64,
    env: CyberEnv,
    policy: Network,
    value: Network,
    opt: PpoOptimizer,
    rng: ChaCha8Rng,
    tracker: EpisodeTracker,
    episodes: Vec<EpisodeRow>,
    updates: Vec<UpdateRow>,
    clock: Instant,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.env.resolve_spec(Path::new("."))?;
        let env = CyberEnv::new(spec, seed)?;
        let (n_obs, n_act) = (env.observation_size(), env.action_count());
        let policy = cfg
            .policy
            .build(n_obs, n_act, true, mix(seed, 1), mix(seed, 4))?;
        let value = cfg
            .value
            .build(n_obs, 1, false, mix(seed, 2), mix(seed, 5))?;
        let opt = PpoOptimizer::new(&policy, &value);
        let mut cfg = cfg.clone();
        cfg.seeds = vec![seed];
        Ok(Trainer {
            cfg,
            seed,
            env,
            policy,
            value,
            opt,
            rng: ChaCha8Rng::seed_from_u64(mix(seed, 3)),
            tracker: EpisodeTracker::default(),
            episodes: Vec::new(),
            updates: Vec::new(),
            clock: Instant::now(),
        })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let spec = c.config.env.resolve_spec(Path::new("."))?;
        let env = CyberEnv::restore(spec, c.env)?;
        let policy = Network::from_state(c.policy)?;
        let value = Network::from_state(c.value)?;
        if c.optimizer.policy.m.len() != policy.n_params()
            || c.optimizer.value.m.len() != value.n_params()
        {
            return Err(Error::Config(
                "checkpoint optimizer state does not match its heads".into(),
            ));
        }
        Ok(Trainer {
            cfg: c.config,
            seed: c.seed,
            env,
            policy,
            value,
            opt: c.optimizer,
            rng: c.rng,
            tracker: c.tracker,
            episodes: c.episodes,
            updates: c.updates,
            clock: Instant::now(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            config: self.cfg.clone(),
            seed: self.seed,
            policy: self.policy.state(),
            value: self.value.state(),
            optimizer: self.opt.clone(),
            rng: self.rng.clone(),
            env: self.env.snapshot(),
            tracker: self.tracker,
            episodes: self.episodes.clone(),
            updates: self.updates.clone(),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policy(&self) -> &Network {
        &self.policy
    }

    pub fn value(&self) -> &Network {
        &self.value
    }

    pub fn episodes(&self) -> &[EpisodeRow] {
        &self.episodes
    }

    pub fn updates(&self) -> &[UpdateRow] {
        &self.updates
    }

    pub fn is_finished(&self) -> bool {
        self.episodes.len() >= self.cfg.episodes
    }

    /// One rollout followed by one PPO update (skipped when the rollout
    /// completes the configured episode budget). Returns the rows added.
    pub fn advance<W: Write>(
        &mut self,
        trace: Option<&mut TraceWriter<W>>,
    ) -> Result<(Vec<EpisodeRow>, Option<UpdateRow>)> {
        let started = Instant::now();
        let (p_calls, v_calls) = (self.policy.sampler_calls(), self.value.sampler_calls());
        let mut env = Traced {
            env: &mut self.env,
            trace,
        };
        let reuse =
            self.cfg.ppo.reuse_rollout_support && (self.policy.is_dbm() || self.value.is_dbm());
        let mut buf = collect_rollout(
            &mut env,
            &self.policy,
            &self.value,
            self.cfg.ppo.n_steps,
            &mut self.rng,
            &mut self.tracker,
            reuse,
        )?;
        let mut new_rows = Vec::new();
        for ep in &buf.episodes {
            if self.episodes.len() >= self.cfg.episodes {
                break;
            }
            let wall_ms = if self.cfg.record_wall_time {
                let ms = ep
                    .finished
                    .saturating_duration_since(self.clock)
                    .as_millis() as u64;
                self.clock = ep.finished;
                ms
            } else {
                0
            };
            let row = EpisodeRow {
                episode: self.episodes.len() + 1,
                total_reward: ep.total_reward,
                steps: ep.steps,
                wall_ms,
            };
            self.episodes.push(row.clone());
            new_rows.push(row);
        }
        if self.is_finished() {
            return Ok((new_rows, None));
        }
        let boot = buf.bootstrap_value;
        compute_gae(&mut buf, self.cfg.ppo.gamma, self.cfg.ppo.gae_lambda, boot);
        let stats = ppo_update(
            &mut self.policy,
            &mut self.value,
            &buf,
            &self.cfg.ppo,
            &mut self.opt,
            &mut self.rng,
        )?;
        let row = UpdateRow {
            update: self.updates.len() + 1,
            episodes_done: self.episodes.len(),
            policy_sampler_calls: self.policy.sampler_calls() - p_calls,
            value_sampler_calls: self.value.sampler_calls() - v_calls,
            policy_evaluations: buf.policy_evaluations + stats.policy_evaluations,
            value_evaluations: buf.value_evaluations + stats.value_evaluations,
            steps: buf.len(),
            wall_ms: if self.cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
            stats,
        };
        self.updates.push(row.clone());
        Ok((new_rows, Some(row)))
    }

    pub fn metrics(&self, aborted: Option<String>) -> RunMetrics {
        let mut m = RunMetrics {
            variant: self.cfg.variant_name(),
            seed: self.seed,
            episodes: self.episodes.clone(),
            updates: self.updates.clone(),
            moving_average: Vec::new(),
            plateau_episode: None,
            final_level: None,
            aborted,
        };
        m.finish(&self.cfg.plateau);
        m
    }
}

struct RunFiles {
    episodes: csv::Writer<File>,
    updates: csv::Writer<File>,
    window: usize,
    recent: Vec<f64>,
}

impl RunFiles {
    fn create(dir: &Path, window: usize) -> Result<Self> {
        let mut episodes = csv::Writer::from_path(dir.join("episodes.csv"))?;
        episodes.write_record(EPISODE_COLUMNS)?;
        let mut updates = csv::Writer::from_path(dir.join("updates.csv"))?;
        updates.write_record(UPDATE_COLUMNS)?;
        Ok(RunFiles {
            episodes,
            updates,
            window,
            recent: Vec::new(),
        })
    }

    fn episode(&mut self, row: &EpisodeRow) -> Result<()> {
        self.recent.push(row.total_reward);
        let ma = if self.recent.len() >= self.window {
            let tail = &self.recent[self.recent.len() - self.window..];
            (tail.iter().sum::<f64>() / self.window as f64).to_string()
        } else {
            String::new()
        };
        self.episodes.write_record([
            row.episode.to_string(),
            row.total_reward.to_string(),
            row.steps.to_string(),
            ma,
            row.wall_ms.to_string(),
        ])?;
        self.episodes.flush()?;
        Ok(())
    }

    fn update(&mut self, row: &UpdateRow) -> Result<()> {
        self.updates.write_record(row.record())?;
        self.updates.flush()?;
        Ok(())
    }
}

/// Directory of one run below the experiment output directory.
pub fn run_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join(variant).join(format!("seed-{seed}"))
}

/// Train `trainer` to completion, writing into `dir`. Existing history in
/// the trainer (after a resume) is rewritten first.
pub fn drive(mut trainer: Trainer, dir: &Path) -> Result<RunMetrics> {
    fs::create_dir_all(dir)?;
    let cfg = trainer.cfg.clone();
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut files = RunFiles::create(dir, cfg.plateau.window)?;
    for row in trainer.episodes.clone() {
        files.episode(&row)?;
    }
    for row in trainer.updates.clone() {
        files.update(&row)?;
    }
    let mut trace = if cfg.trace {
        Some(TraceWriter::new(BufWriter::new(File::create(
            dir.join("trace.csv"),
        )?))?)
    } else {
        None
    };
    let ckpt_path = dir.join("checkpoint.json");
    let mut aborted = None;
    while !trainer.is_finished() {
        match trainer.advance(trace.as_mut()) {
            Ok((eps, upd)) => {
                for row in &eps {
                    files.episode(row)?;
                }
                if let Some(u) = upd {
                    files.update(&u)?;
                    if cfg.checkpoint_every > 0 && u.update % cfg.checkpoint_every == 0 {
                        trainer.checkpoint().save(&ckpt_path)?;
                    }
                }
            }
            Err(Error::Numerical(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(t) = trace.as_mut() {
        t.flush()?;
    }
    trainer.checkpoint().save(&ckpt_path)?;
    let metrics = trainer.metrics(aborted.clone());
    write_metadata(dir, &cfg, &metrics)?;
    match aborted {
        Some(msg) => Err(Error::Numerical(format!(
            "{} seed {}: {msg} (partial metrics kept in {})",
            metrics.variant,
            metrics.seed,
            dir.display()
        ))),
        None => Ok(metrics),
    }
}

fn write_metadata(dir: &Path, cfg: &ExperimentConfig, m: &RunMetrics) -> Result<()> {
    let meta = Metadata {
        format: METADATA_FORMAT.into(),
        version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        variant: m.variant.clone(),
        seed: m.seed,
        episodes_configured: cfg.episodes,
        episodes_completed: m.episodes.len(),
        updates: m.updates.len(),
        plateau_episode: m.plateau_episode,
        final_level: m.final_level,
        aborted: m.aborted.clone(),
        wall_time_recorded: cfg.record_wall_time,
    };
    fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

/// Train one variant for every configured seed (in parallel), each into
/// `output_dir/<variant>/seed-<s>`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let variant = cfg.variant_name();
    let results: Vec<Result<RunMetrics>> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            drive(
                Trainer::new(cfg, s)?,
                &run_dir(&cfg.output_dir, &variant, s),
            )
        })
        .collect();
    results.into_iter().collect()
}

/// Continue a run from its checkpoint, rewriting its directory.
pub fn resume_run(checkpoint: &Path, dir: &Path) -> Result<RunMetrics> {
    drive(
        Trainer::from_checkpoint(Checkpoint::load(checkpoint)?)?,
        dir,
    )
}

/// Train all four head combinations for every seed and write the
/// comparison report into the output directory.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<(Vec<RunMetrics>, Report)> {
    cfg.validate()?;
    let jobs: Vec<(ExperimentConfig, u64)> = cfg
        .four_variants()
        .into_iter()
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let results: Vec<Result<RunMetrics>> = jobs
        .par_iter()
        .map(|(v, s)| {
            drive(
                Trainer::new(v, *s)?,
                &run_dir(&v.output_dir, &v.variant_name(), *s),
            )
        })
        .collect();
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = compare_report(&runs, &cfg.plateau)?;
    report.write(&cfg.output_dir, &runs)?;
    Ok((runs, report))
}

/// Read a run directory back into metrics, recomputing derived series
/// with `plateau`.
pub fn load_run(dir: &Path, plateau: &PlateauConfig) -> Result<RunMetrics> {
    let meta: Metadata = serde_json::from_str(&fs::read_to_string(dir.join("metadata.json"))?)?;
    if meta.format != METADATA_FORMAT {
        return Err(Error::Config(format!(
            "{}: not a run directory",
            dir.display()
        )));
    }
    let mut rdr = csv::Reader::from_path(dir.join("episodes.csv"))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != EPISODE_COLUMNS {
        return Err(Error::Config(format!(
            "{}: unexpected episodes.csv columns {header:?}",
            dir.display()
        )));
    }
    let mut episodes = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| {
                Error::Config(format!("{}: bad number `{}`: {e}", dir.display(), &rec[i]))
            })
        };
        episodes.push(EpisodeRow {
            episode: num(0)? as usize,
            total_reward: num(1)?,
            steps: num(2)? as usize,
            wall_ms: num(4)? as u64,
        });
    }
    let mut m = RunMetrics {
        variant: meta.variant,
        seed: meta.seed,
        episodes,
        updates: Vec::new(),
        moving_average: Vec::new(),
        plateau_episode: None,
        final_level: None,
        aborted: meta.aborted,
    };
    m.finish(plateau);
    Ok(m)
}

/// Find every run directory (one holding `metadata.json`) below `root`.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join("metadata.json").is_file() {
            out.push(d);
            continue;
        }
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub seed: u64,
    pub plateau_episode: Option<usize>,
    /// Plateau episode as a percentage of the baseline's for the same seed.
    pub percent_of_baseline: Option<f64>,
    pub final_level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_plateau_episode: Option<f64>,
    pub mean_percent_of_baseline: Option<f64>,
    pub mean_final_level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub variants: Vec<VariantSummary>,
    /// `(max - min) / max |level|` over the variants' mean final levels.
    pub final_level_spread: Option<f64>,
}

const VARIANT_ORDER: [&str; 4] = ["mlp-mlp", "dbm-mlp", "mlp-dbm", "dbm-dbm"];

fn variant_rank(v: &str) -> (usize, String) {
    (
        VARIANT_ORDER
            .iter()
            .position(|x| *x == v)
            .unwrap_or(VARIANT_ORDER.len()),
        v.to_string(),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Plateau table of every run relative to the `mlp-mlp` baseline of the
/// same seed. All runs must share the episode count and seed list.
pub fn compare_report(runs: &[RunMetrics], plateau: &PlateauConfig) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Empty("run list"));
    }
    let n_eps = runs[0].episodes.len();
    if let Some(r) = runs.iter().find(|r| r.episodes.len() != n_eps) {
        return Err(Error::StructureMismatch(format!(
            "{} seed {} has {} episodes, expected {n_eps}",
            r.variant,
            r.seed,
            r.episodes.len()
        )));
    }
    let mut variants: Vec<String> = runs.iter().map(|r| r.variant.clone()).collect();
    variants.sort_by_key(|v| variant_rank(v));
    variants.dedup();
    let seeds_of = |v: &str| {
        let mut s: Vec<u64> = runs
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.seed)
            .collect();
        s.sort_unstable();
        s
    };
    let seeds = seeds_of(&variants[0]);
    for v in &variants {
        if seeds_of(v) != seeds {
            return Err(Error::StructureMismatch(format!(
                "variant {v} was run on different seeds"
            )));
        }
    }
    let derived: Vec<RunMetrics> = runs
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.finish(plateau);
            r
        })
        .collect();
    let get = |v: &str, s: u64| derived.iter().find(|r| r.variant == v && r.seed == s);
    let mut rows = Vec::new();
    for v in &variants {
        for &s in &seeds {
            let r = get(v, s).unwrap();
            let base = get(BASELINE_VARIANT, s).and_then(|b| b.plateau_episode);
            let pct = match (r.plateau_episode, base) {
                (Some(p), Some(b)) => Some(100.0 * p as f64 / b as f64),
                _ => None,
            };
            rows.push(ReportRow {
                variant: v.clone(),
                seed: s,
                plateau_episode: r.plateau_episode,
                percent_of_baseline: pct,
                final_level: r.final_level,
            });
        }
    }
    let summaries: Vec<VariantSummary> = variants
        .iter()
        .map(|v| {
            let mine = || rows.iter().filter(move |r| &r.variant == v);
            VariantSummary {
                variant: v.clone(),
                mean_plateau_episode: mean(
                    mine().filter_map(|r| r.plateau_episode.map(|p| p as f64)),
                ),
                mean_percent_of_baseline: mean(mine().filter_map(|r| r.percent_of_baseline)),
                mean_final_level: mean(mine().filter_map(|r| r.final_level)),
            }
        })
        .collect();
    let levels: Vec<f64> = summaries
        .iter()
        .filter_map(|s| s.mean_final_level)
        .collect();
    let final_level_spread = (levels.len() == summaries.len() && !levels.is_empty()).then(|| {
        let hi = levels.iter().cloned().fold(f64::MIN, f64::max);
        let lo = levels.iter().cloned().fold(f64::MAX, f64::min);
        let scale = levels.iter().map(|l| l.abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            0.0
        } else {
            (hi - lo) / scale
        }
    });
    Ok(Report {
        rows,
        variants: summaries,
        final_level_spread,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into())
}

impl Report {
    /// Plain-text table: one line per variant with per-seed plateaus.
    pub fn table(&self) -> String {
        let mut s =
            String::from("| variant | seed | plateau episode | % of mlp-mlp | final MA level |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.variant,
                r.seed,
                r.plateau_episode
                    .map(|p| p.to_string())
                    .unwrap_or_else(|| "-".into()),
                opt(r.percent_of_baseline),
                opt(r.final_level),
            ));
        }
        s.push_str(
            "\n| variant | mean plateau episode | mean % of mlp-mlp | mean final MA level |\n",
        );
        s.push_str("|---|---|---|---|\n");
        for v in &self.variants {
            s.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                v.variant,
                opt(v.mean_plateau_episode),
                opt(v.mean_percent_of_baseline),
                opt(v.mean_final_level)
            ));
        }
        if let Some(sp) = self.final_level_spread {
            s.push_str(&format!(
                "\nfinal level spread across variants: {:.1}%\n",
                100.0 * sp
            ));
        }
        s
    }

    /// Write `report.md`, `report.csv`, `report.json` and the long-format
    /// `reward_curves.csv` (variant, seed, episode, reward, moving average).
    pub fn write(&self, dir: &Path, runs: &[RunMetrics]) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.md"), self.table())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record([
            "variant",
            "seed",
            "plateau_episode",
            "percent_of_baseline",
            "final_level",
        ])?;
        let s = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                r.plateau_episode.map(|p| p.to_string()).unwrap_or_default(),
                s(r.percent_of_baseline),
                s(r.final_level),
            ])?;
        }
        w.flush()?;
        let mut c = csv::Writer::from_path(dir.join("reward_curves.csv"))?;
        c.write_record(["variant", "seed", "episode", "total_reward", "ma_reward"])?;
        let mut sorted: Vec<&RunMetrics> = runs.iter().collect();
        sorted.sort_by_key(|r| (variant_rank(&r.variant), r.seed));
        for r in sorted {
            let window = r.episodes.len() + 1 - r.moving_average.len().min(r.episodes.len());
            for (i, e) in r.episodes.iter().enumerate() {
                let ma = if r.moving_average.is_empty() || i + 1 < window {
                    String::new()
                } else {
                    r.moving_average[i + 1 - window].to_string()
                };
                c.write_record([
                    r.variant.clone(),
                    r.seed.to_string(),
                    e.episode.to_string(),
                    e.total_reward.to_string(),
                    ma,
                ])?;
            }
        }
        c.flush()?;
        Ok(())
    }
}
