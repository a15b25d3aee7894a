//! Sampling hidden configurations of a [`ClampedHamiltonian`].
//!
//! Three backends share the [`HiddenSampler`] interface:
//!
//! - exact enumeration of all `2^H` configurations (small models only),
//! - single-site Gibbs MCMC at the Hamiltonian's own inverse temperature,
//! - simulated annealing, standing in for a hardware annealer: each read
//!   follows an increasing inverse-temperature schedule and returns its
//!   final configuration, so reads concentrate on low-energy states.
//!
//! Reads are deduplicated into a [`SampleSet`]. Probabilities over a sample
//! set are always recomputed from energies ([`truncated_probs`]); configs
//! that were never sampled get probability zero.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy_model::ClampedHamiltonian;
use crate::{Error, Result};

pub const DEFAULT_NUM_READS: usize = 100;
pub const DEFAULT_EXACT_CAP: usize = 20;
pub const DEFAULT_ANNEAL_START: f64 = 0.1;
pub const DEFAULT_ANNEAL_SWEEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Exact,
    Gibbs,
    Anneal,
}

impl fmt::Display for SampleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleSource::Exact => "exact",
            SampleSource::Gibbs => "gibbs",
            SampleSource::Anneal => "anneal",
        })
    }
}

/// Backend selector; same tags as [`SampleSource`].
pub type Backend = SampleSource;

impl std::str::FromStr for SampleSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SampleSource::Exact),
            "gibbs" => Ok(SampleSource::Gibbs),
            "anneal" => Ok(SampleSource::Anneal),
            other => Err(Error::Config(format!(
                "unknown sampler backend `{other}` (expected exact, gibbs or anneal)"
            ))),
        }
    }
}

/// Unique hidden configurations with their read counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    configs: Vec<Vec<u8>>,
    counts: Vec<u64>,
    source: SampleSource,
}

impl SampleSet {
    /// Deduplicate raw reads, keeping first-occurrence order.
    pub fn from_reads<I>(reads: I, source: SampleSource) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<u8>>,
    {
        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut configs: Vec<Vec<u8>> = Vec::new();
        let mut counts = Vec::new();
        for read in reads {
            if let Some(first) = configs.first() {
                if first.len() != read.len() {
                    return Err(Error::dim("sample read", first.len(), read.len()));
                }
            }
            match index.get(&read) {
                Some(&k) => counts[k] += 1,
                None => {
                    index.insert(read.clone(), configs.len());
                    configs.push(read);
                    counts.push(1);
                }
            }
        }
        if configs.is_empty() {
            return Err(Error::Empty("sample reads"));
        }
        Ok(SampleSet {
            configs,
            counts,
            source,
        })
    }

    pub fn configs(&self) -> &[Vec<u8>] {
        &self.configs
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn source(&self) -> SampleSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn total_reads(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn n_hidden(&self) -> usize {
        self.configs[0].len()
    }

    /// Read frequencies, `count / total`.
    pub fn empirical(&self) -> Vec<f64> {
        let total = self.total_reads() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Same set with configs appended (counts 1); used to grow a support.
    pub fn extended(&self, extra: impl IntoIterator<Item = Vec<u8>>) -> Result<Self> {
        let reads = self
            .configs
            .iter()
            .zip(&self.counts)
            .flat_map(|(c, &n)| std::iter::repeat_n(c.clone(), n as usize))
            .chain(extra);
        SampleSet::from_reads(reads, self.source)
    }
}

/// One inverse-temperature stage of an annealing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealStage {
    pub beta: f64,
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_reads: usize,
    /// Gibbs sweeps discarded before the first read.
    pub burn_in: usize,
    /// Gibbs sweeps between retained reads.
    pub thin: usize,
    /// Explicit schedule; when absent, a geometric ramp from
    /// `min(0.1, beta)` to the Hamiltonian's beta over 1000 single sweeps.
    pub anneal_schedule: Option<Vec<AnnealStage>>,
    pub rng_seed: u64,
    /// Largest hidden-unit count the exact backend will enumerate.
    pub exact_cap: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_reads: DEFAULT_NUM_READS,
            burn_in: 100,
            thin: 2,
            anneal_schedule: None,
            rng_seed: 0,
            exact_cap: DEFAULT_EXACT_CAP,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_reads == 0 {
            return Err(Error::Config("num_reads must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if let Some(schedule) = &self.anneal_schedule {
            validate_schedule(schedule)?;
        }
        Ok(())
    }

    /// The schedule annealing will follow for a Hamiltonian at `beta`.
    pub fn resolved_schedule(&self, beta: f64) -> Result<Vec<AnnealStage>> {
        match &self.anneal_schedule {
            Some(s) => {
                validate_schedule(s)?;
                Ok(s.clone())
            }
            None => Ok(geometric_schedule(
                DEFAULT_ANNEAL_START.min(beta),
                beta,
                DEFAULT_ANNEAL_SWEEPS,
            )),
        }
    }
}

fn validate_schedule(schedule: &[AnnealStage]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Config("anneal schedule is empty".into()));
    }
    if schedule
        .iter()
        .any(|s| !(s.beta >= 0.0 && s.beta.is_finite()))
    {
        return Err(Error::Config(
            "anneal inverse temperatures must be finite and non-negative".into(),
        ));
    }
    if schedule.windows(2).any(|w| w[1].beta < w[0].beta) {
        return Err(Error::Config(
            "anneal inverse temperatures must be non-decreasing".into(),
        ));
    }
    Ok(())
}

/// `n` single-sweep stages with inverse temperature rising geometrically
/// from `start` to `end`.
pub fn geometric_schedule(start: f64, end: f64, n: usize) -> Vec<AnnealStage> {
    if n <= 1 {
        return vec![AnnealStage {
            beta: end,
            sweeps: 1,
        }];
    }
    let ratio = end / start;
    (0..n)
        .map(|k| AnnealStage {
            beta: if k + 1 == n {
                end
            } else {
                start * ratio.powf(k as f64 / (n - 1) as f64)
            },
            sweeps: 1,
        })
        .collect()
}

/// Every hidden configuration once, in little-endian code order.
pub fn exact_enumerate(ch: &ClampedHamiltonian) -> Result<SampleSet> {
    exact_enumerate_capped(ch, DEFAULT_EXACT_CAP)
}

pub fn exact_enumerate_capped(ch: &ClampedHamiltonian, cap: usize) -> Result<SampleSet> {
    let n = ch.n_hidden();
    if n > cap || n >= 64 {
        return Err(Error::SupportCapExceeded { n_hidden: n, cap });
    }
    let configs: Vec<Vec<u8>> = (0..1u64 << n)
        .map(|code| (0..n).map(|k| ((code >> k) & 1) as u8).collect())
        .collect();
    let counts = vec![1; configs.len()];
    Ok(SampleSet {
        configs,
        counts,
        source: SampleSource::Exact,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_config(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen::<bool>() as u8).collect()
}

fn heat_bath_sweep(ch: &ClampedHamiltonian, h: &mut [u8], beta: f64, rng: &mut ChaCha8Rng) {
    for k in 0..h.len() {
        let field = ch.local_field(h, k);
        let p_on = 1.0 / (1.0 + (beta * field).exp());
        h[k] = (rng.gen::<f64>() < p_on) as u8;
    }
}

fn metropolis_sweep(ch: &ClampedHamiltonian, h: &mut [u8], beta: f64, rng: &mut ChaCha8Rng) {
    for k in 0..h.len() {
        let field = ch.local_field(h, k);
        // energy change of flipping unit k
        let delta = if h[k] == 1 { -field } else { field };
        if delta <= 0.0 || rng.gen::<f64>() < (-beta * delta).exp() {
            h[k] ^= 1;
        }
    }
}

/// Single-site Gibbs chain at the Hamiltonian's beta (stream 0).
pub fn gibbs_sample(ch: &ClampedHamiltonian, cfg: &SamplerConfig) -> Result<SampleSet> {
    gibbs_sample_stream(ch, cfg, 0)
}

pub fn gibbs_sample_stream(
    ch: &ClampedHamiltonian,
    cfg: &SamplerConfig,
    stream: u64,
) -> Result<SampleSet> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.rng_seed, stream);
    let beta = ch.beta();
    let mut h = random_config(&mut rng, ch.n_hidden());
    for _ in 0..cfg.burn_in {
        heat_bath_sweep(ch, &mut h, beta, &mut rng);
    }
    let mut reads = Vec::with_capacity(cfg.num_reads);
    for _ in 0..cfg.num_reads {
        for _ in 0..cfg.thin {
            heat_bath_sweep(ch, &mut h, beta, &mut rng);
        }
        reads.push(h.clone());
    }
    SampleSet::from_reads(reads, SampleSource::Gibbs)
}

/// Independent simulated-annealing reads (stream 0).
pub fn anneal_sample(ch: &ClampedHamiltonian, cfg: &SamplerConfig) -> Result<SampleSet> {
    anneal_sample_stream(ch, cfg, 0)
}

pub fn anneal_sample_stream(
    ch: &ClampedHamiltonian,
    cfg: &SamplerConfig,
    stream: u64,
) -> Result<SampleSet> {
    cfg.validate()?;
    let schedule = cfg.resolved_schedule(ch.beta())?;
    let mut rng = stream_rng(cfg.rng_seed, stream);
    let reads = (0..cfg.num_reads).map(|_| {
        let mut h = random_config(&mut rng, ch.n_hidden());
        for stage in &schedule {
            for _ in 0..stage.sweeps {
                metropolis_sweep(ch, &mut h, stage.beta, &mut rng);
            }
        }
        h
    });
    SampleSet::from_reads(reads.collect::<Vec<_>>(), SampleSource::Anneal)
}

/// Common interface for the three backends. `stream` selects an independent
/// random stream under the configured seed; exact enumeration ignores it.
pub trait HiddenSampler: Send + Sync {
    fn source(&self) -> SampleSource;
    fn sample(&self, ch: &ClampedHamiltonian, stream: u64) -> Result<SampleSet>;
}

pub struct ExactSampler {
    pub cap: usize,
}

pub struct GibbsSampler(pub SamplerConfig);

pub struct AnnealSampler(pub SamplerConfig);

impl HiddenSampler for ExactSampler {
    fn source(&self) -> SampleSource {
        SampleSource::Exact
    }

    fn sample(&self, ch: &ClampedHamiltonian, _stream: u64) -> Result<SampleSet> {
        exact_enumerate_capped(ch, self.cap)
    }
}

impl HiddenSampler for GibbsSampler {
    fn source(&self) -> SampleSource {
        SampleSource::Gibbs
    }

    fn sample(&self, ch: &ClampedHamiltonian, stream: u64) -> Result<SampleSet> {
        gibbs_sample_stream(ch, &self.0, stream)
    }
}

impl HiddenSampler for AnnealSampler {
    fn source(&self) -> SampleSource {
        SampleSource::Anneal
    }

    fn sample(&self, ch: &ClampedHamiltonian, stream: u64) -> Result<SampleSet> {
        anneal_sample_stream(ch, &self.0, stream)
    }
}

pub fn sampler_for(backend: Backend, cfg: &SamplerConfig) -> Box<dyn HiddenSampler> {
    match backend {
        SampleSource::Exact => Box::new(ExactSampler { cap: cfg.exact_cap }),
        SampleSource::Gibbs => Box::new(GibbsSampler(cfg.clone())),
        SampleSource::Anneal => Box::new(AnnealSampler(cfg.clone())),
    }
}

/// `log sum exp(x)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sample_energies(ch: &ClampedHamiltonian, s: &SampleSet) -> Result<Vec<f64>> {
    if s.n_hidden() != ch.n_hidden() {
        return Err(Error::dim("sample configs", ch.n_hidden(), s.n_hidden()));
    }
    Ok(s.configs.iter().map(|c| ch.energy_of(c)).collect())
}

/// Boltzmann probabilities restricted to the sampled configs.
pub fn truncated_probs(ch: &ClampedHamiltonian, s: &SampleSet) -> Result<Vec<f64>> {
    let energies = sample_energies(ch, s)?;
    Ok(probs_from_energies(&energies, ch.beta()))
}

pub(crate) fn probs_from_energies(energies: &[f64], beta: f64) -> Vec<f64> {
    let logw: Vec<f64> = energies.iter().map(|e| -beta * e).collect();
    let lz = log_sum_exp(&logw);
    logw.iter().map(|l| (l - lz).exp()).collect()
}

/// Debug dump: one row per unique config with its count, energy and
/// truncated probability.
pub fn write_sample_csv<W: Write>(ch: &ClampedHamiltonian, s: &SampleSet, out: W) -> Result<()> {
    let energies = sample_energies(ch, s)?;
    let probs = probs_from_energies(&energies, ch.beta());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config", "count", "energy", "probability", "source"])?;
    for (k, config) in s.configs.iter().enumerate() {
        let bits: String = config
            .iter()
            .map(|&b| if b == 1 { '1' } else { '0' })
            .collect();
        w.write_record([
            bits,
            s.counts[k].to_string(),
            energies[k].to_string(),
            probs[k].to_string(),
            s.source.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
