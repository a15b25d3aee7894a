//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export takes a JSON request string and returns a JSON response
//! string. The plain-Rust functions behind them are public so they can be
//! exercised without a browser.

use boltzppo::energy_model::{
    clamp, init_weights, ClampedHamiltonian, DbmTopology, UnitAssignment,
};
use boltzppo::free_energy::{
    action_distribution, exact_free_energy, truncated_free_energy, FreeEnergyHead, HeadKind,
};
use boltzppo::sampler::{exact_enumerate, sampler_for, Backend, SampleSet, SamplerConfig};
use boltzppo::{Error, Result};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// A random clamped model: `state` bits feed hidden layers of the given sizes.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct ModelRequest {
    pub state: Vec<u8>,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub scale: f64,
    pub beta: f64,
}

impl Default for ModelRequest {
    fn default() -> Self {
        ModelRequest {
            state: vec![1, 0, 1],
            hidden: vec![3, 3],
            seed: 0,
            scale: 1.0,
            beta: 1.0,
        }
    }
}

impl ModelRequest {
    fn hamiltonian(&self) -> Result<ClampedHamiltonian> {
        let topo = DbmTopology::new(self.state.len(), self.hidden.clone(), 0)?;
        if topo.n_hidden() > 12 {
            return Err(Error::InvalidParameter(
                "the demo enumerates at most 12 hidden units".into(),
            ));
        }
        let mut w = init_weights(&topo, self.seed, self.scale)?;
        w.beta = self.beta;
        clamp(&topo, &w, &UnitAssignment::new(self.state.clone())?)
    }
}

fn code_of(h: &[u8]) -> usize {
    h.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum()
}

fn histogram(s: &SampleSet, n_codes: usize) -> Vec<f64> {
    let mut p = vec![0.0; n_codes];
    let total = s.total_reads() as f64;
    for (c, &n) in s.configs().iter().zip(s.counts()) {
        p[code_of(c)] += n as f64 / total;
    }
    p
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DistributionRequest {
    #[serde(flatten)]
    pub model: ModelRequest,
    pub num_reads: usize,
    pub sampler_seed: u64,
}

impl Default for DistributionRequest {
    fn default() -> Self {
        DistributionRequest {
            model: ModelRequest::default(),
            num_reads: 2000,
            sampler_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributionResponse {
    pub n_hidden: usize,
    /// Indexed by configuration code, bit `i` being hidden unit `i`.
    pub exact: Vec<f64>,
    pub gibbs: Vec<f64>,
    pub anneal: Vec<f64>,
    pub energies: Vec<f64>,
    pub tv_gibbs: f64,
    pub tv_anneal: f64,
}

/// Exact Boltzmann distribution over hidden configurations next to the
/// Gibbs and annealing histograms.
pub fn distribution(req: &DistributionRequest) -> Result<DistributionResponse> {
    let ch = req.model.hamiltonian()?;
    let n_codes = 1usize << ch.n_hidden();
    let all = exact_enumerate(&ch)?;
    let mut energies = vec![0.0; n_codes];
    for c in all.configs() {
        energies[code_of(c)] = ch.energy_of(c);
    }
    let f = exact_free_energy(&ch)?;
    let exact: Vec<f64> = energies
        .iter()
        .map(|e| (-ch.beta() * (e - f)).exp())
        .collect();
    let cfg = SamplerConfig {
        num_reads: req.num_reads,
        rng_seed: req.sampler_seed,
        ..SamplerConfig::default()
    };
    let gibbs = histogram(&sampler_for(Backend::Gibbs, &cfg).sample(&ch, 0)?, n_codes);
    let anneal = histogram(&sampler_for(Backend::Anneal, &cfg).sample(&ch, 0)?, n_codes);
    Ok(DistributionResponse {
        n_hidden: ch.n_hidden(),
        tv_gibbs: total_variation(&exact, &gibbs),
        tv_anneal: total_variation(&exact, &anneal),
        exact,
        gibbs,
        anneal,
        energies,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct FreeEnergyRequest {
    #[serde(flatten)]
    pub model: ModelRequest,
    pub backend: Backend,
    pub reads: Vec<usize>,
    pub sampler_seed: u64,
}

impl Default for FreeEnergyRequest {
    fn default() -> Self {
        FreeEnergyRequest {
            model: ModelRequest::default(),
            backend: Backend::Gibbs,
            reads: vec![1, 2, 5, 10, 20, 50, 100, 200, 500],
            sampler_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FreeEnergyResponse {
    pub exact: f64,
    pub reads: Vec<usize>,
    pub truncated: Vec<f64>,
    /// Distinct configurations behind each truncated estimate.
    pub support_size: Vec<usize>,
}

/// Truncated free energy as the number of reads grows, against the exact value.
pub fn free_energy_curve(req: &FreeEnergyRequest) -> Result<FreeEnergyResponse> {
    let ch = req.model.hamiltonian()?;
    let exact = exact_free_energy(&ch)?;
    let mut truncated = Vec::with_capacity(req.reads.len());
    let mut support_size = Vec::with_capacity(req.reads.len());
    for &n in &req.reads {
        let cfg = SamplerConfig {
            num_reads: n,
            rng_seed: req.sampler_seed,
            ..SamplerConfig::default()
        };
        let s = sampler_for(req.backend, &cfg).sample(&ch, 0)?;
        truncated.push(truncated_free_energy(&ch, &s)?);
        support_size.push(s.len());
    }
    Ok(FreeEnergyResponse {
        exact,
        reads: req.reads.clone(),
        truncated,
        support_size,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct PolicyRequest {
    #[serde(flatten)]
    pub model: ModelRequest,
    pub n_actions: usize,
    pub num_reads: usize,
    pub sampler_seed: u64,
}

impl Default for PolicyRequest {
    fn default() -> Self {
        PolicyRequest {
            model: ModelRequest::default(),
            n_actions: 4,
            num_reads: 100,
            sampler_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyRow {
    pub backend: Backend,
    pub free_energies: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Action distribution `softmax(-F)` of a DBM policy head under each backend.
pub fn policy(req: &PolicyRequest) -> Result<Vec<PolicyRow>> {
    let m = &req.model;
    let topo = DbmTopology::new(m.state.len(), m.hidden.clone(), req.n_actions)?;
    let mut w = init_weights(&topo, m.seed, m.scale)?;
    w.beta = m.beta;
    let cfg = SamplerConfig {
        num_reads: req.num_reads,
        rng_seed: req.sampler_seed,
        ..SamplerConfig::default()
    };
    [Backend::Exact, Backend::Gibbs, Backend::Anneal]
        .into_iter()
        .map(|backend| {
            let head = FreeEnergyHead::new(
                topo.clone(),
                w.clone(),
                backend,
                cfg.clone(),
                HeadKind::Policy {
                    n_actions: req.n_actions,
                },
            )?;
            let eval = head.policy_eval(&m.state)?;
            Ok(PolicyRow {
                backend,
                probabilities: action_distribution(&eval.logits)?,
                free_energies: eval.free_energies,
            })
        })
        .collect()
}

fn call<Q, R>(json: &str, f: impl Fn(&Q) -> Result<R>) -> std::result::Result<String, String>
where
    Q: for<'de> Deserialize<'de>,
    R: Serialize,
{
    let req: Q = serde_json::from_str(json).map_err(|e| format!("bad request: {e}"))?;
    let resp = f(&req).map_err(|e| e.to_string())?;
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = boltzmannDistribution)]
pub fn boltzmann_distribution_js(json: &str) -> std::result::Result<String, JsValue> {
    call(json, distribution).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = freeEnergyCurve)]
pub fn free_energy_curve_js(json: &str) -> std::result::Result<String, JsValue> {
    call(json, free_energy_curve).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = policyDistribution)]
pub fn policy_distribution_js(json: &str) -> std::result::Result<String, JsValue> {
    call(json, policy).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_distribution_sums_to_one_and_matches_energies() {
        let r = distribution(&DistributionRequest::default()).unwrap();
        assert_eq!(r.exact.len(), 1 << r.n_hidden);
        assert!((r.exact.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((r.gibbs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // ratio of two probabilities is exp(-beta dE)
        let (a, b) = (0, 5);
        let ratio = r.exact[a] / r.exact[b];
        assert!((ratio - (r.energies[b] - r.energies[a]).exp()).abs() < 1e-9 * ratio);
    }

    #[test]
    fn gibbs_histogram_is_close_with_many_reads() {
        let req = DistributionRequest {
            num_reads: 20_000,
            ..DistributionRequest::default()
        };
        let r = distribution(&req).unwrap();
        assert!(r.tv_gibbs < 0.05, "tv {}", r.tv_gibbs);
    }

    #[test]
    fn truncated_free_energy_bounds_exact_from_above() {
        let r = free_energy_curve(&FreeEnergyRequest::default()).unwrap();
        for &t in &r.truncated {
            assert!(t >= r.exact - 1e-12);
        }
    }

    #[test]
    fn exact_backend_policy_sums_to_one() {
        let rows = policy(&PolicyRequest::default()).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert_eq!(row.probabilities.len(), 4);
            assert!((row.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_and_errors() {
        let out = call(r#"{"hidden": [2], "reads": [1, 4]}"#, free_energy_curve).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["reads"].as_array().unwrap().len(), 2);
        assert!(call(r#"{"hidden": [20]}"#, distribution)
            .unwrap_err()
            .contains("12"));
        assert!(call("not json", policy)
            .unwrap_err()
            .starts_with("bad request"));
    }
}
