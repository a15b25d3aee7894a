//! Small episodic cyber-defense environment.
//!
//! A network of nodes and links carries benign (green) traffic. Scripted red
//! agents compromise nodes or flood links; a flood that overloads an
//! unblocked link compromises the link's far endpoint. The blue agent may
//! patch a node, block a link, unblock a link, or do nothing, one action per
//! timestep.
//!
//! Effects within a timestep happen in this order: blue action, red events,
//! green routing, reward, then the clock (and patch countdowns) advance.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ppo::{Environment, Transition};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Pc,
    Server,
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "turns_left")]
pub enum NodeStatus {
    Healthy,
    Compromised,
    Patching(u32),
}

impl NodeStatus {
    fn code(self) -> usize {
        match self {
            NodeStatus::Healthy => 0,
            NodeStatus::Compromised => 1,
            NodeStatus::Patching(_) => 2,
        }
    }

    fn label(self) -> &'static str {
        match self {
            NodeStatus::Healthy => "H",
            NodeStatus::Compromised => "C",
            NodeStatus::Patching(_) => "P",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default = "healthy")]
    pub initial_status: NodeStatus,
}

fn healthy() -> NodeStatus {
    NodeStatus::Healthy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub id: String,
    /// Node indices; floods compromise the second endpoint.
    pub endpoints: (usize, usize),
    pub capacity: f64,
}

/// Green demand on one link, cycled over timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreenFlow {
    pub link: usize,
    pub pattern: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackKind {
    /// Flip a healthy node to compromised.
    Compromise,
    /// Add red load to a link for `duration` steps. The first `ramp_steps`
    /// carry `ramp_load`, the rest `load`. Whenever the link is unblocked
    /// and overloaded, its far endpoint is compromised.
    Flood {
        duration: usize,
        load: f64,
        #[serde(default)]
        ramp_steps: usize,
        #[serde(default)]
        ramp_load: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Node(usize),
    Link(usize),
}

/// A scripted red action. `success_prob` is the chance the attack lands
/// (for floods: the chance the flood launches at all).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedEvent {
    pub timestep: usize,
    pub target: Target,
    pub attack: AttackKind,
    pub success_prob: f64,
}

/// A red agent whose onset is drawn uniformly from `onset_window` (inclusive)
/// at every reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomRedAgent {
    pub onset_window: (usize, usize),
    pub target: Target,
    pub attack: AttackKind,
    pub success_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub healthy: f64,
    pub compromised: f64,
    pub green: f64,
    pub action: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            healthy: 1.0,
            compromised: 2.0,
            green: 1.0,
            action: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub green_traffic: Vec<GreenFlow>,
    #[serde(default)]
    pub red_schedule: Vec<RedEvent>,
    #[serde(default)]
    pub random_red: Vec<RandomRedAgent>,
    pub episode_length: usize,
    #[serde(default = "default_patch_duration")]
    pub patch_duration: u32,
    #[serde(default)]
    pub reward: RewardWeights,
}

fn default_patch_duration() -> u32 {
    2
}

impl NetworkSpec {
    /// Two PCs, a server and three switches joined by seven links; one
    /// scripted attack campaign plus a randomly timed attack on the server.
    pub fn default_six_node() -> Self {
        let node = |id: &str, kind| NodeSpec {
            id: id.into(),
            kind,
            initial_status: NodeStatus::Healthy,
        };
        let link = |id: &str, a, b| LinkSpec {
            id: id.into(),
            endpoints: (a, b),
            capacity: 1.0,
        };
        let flood = AttackKind::Flood {
            duration: 6,
            load: 1.0,
            ramp_steps: 1,
            ramp_load: 0.3,
        };
        NetworkSpec {
            nodes: vec![
                node("pc1", NodeKind::Pc),
                node("pc2", NodeKind::Pc),
                node("server", NodeKind::Server),
                node("switch1", NodeKind::Switch),
                node("switch2", NodeKind::Switch),
                node("switch3", NodeKind::Switch),
            ],
            links: vec![
                link("pc1-switch1", 0, 3),
                link("pc2-switch2", 1, 4),
                link("switch1-switch3", 3, 5),
                link("switch2-switch3", 4, 5),
                link("switch3-server", 5, 2),
                link("switch1-switch2", 3, 4),
                link("pc1-switch2", 0, 4),
            ],
            green_traffic: (0..7)
                .map(|l| GreenFlow {
                    link: l,
                    pattern: vec![0.4],
                })
                .collect(),
            red_schedule: vec![
                RedEvent {
                    timestep: 3,
                    target: Target::Node(0),
                    attack: AttackKind::Compromise,
                    success_prob: 0.9,
                },
                RedEvent {
                    timestep: 6,
                    target: Target::Link(4),
                    attack: flood,
                    success_prob: 0.9,
                },
                RedEvent {
                    timestep: 12,
                    target: Target::Node(1),
                    attack: AttackKind::Compromise,
                    success_prob: 0.9,
                },
                RedEvent {
                    timestep: 18,
                    target: Target::Link(2),
                    attack: flood,
                    success_prob: 0.9,
                },
            ],
            random_red: vec![RandomRedAgent {
                onset_window: (8, 24),
                target: Target::Node(2),
                attack: AttackKind::Compromise,
                success_prob: 0.7,
            }],
            episode_length: 30,
            patch_duration: 2,
            reward: RewardWeights::default(),
        }
    }

    /// The default network with every scripted attack certain and the
    /// randomly timed agent removed.
    pub fn default_deterministic() -> Self {
        let mut spec = Self::default_six_node();
        spec.random_red.clear();
        for e in &mut spec.red_schedule {
            e.success_prob = 1.0;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("network spec: {msg}")));
        if self.nodes.is_empty() {
            return bad("at least one node is required".into());
        }
        if self.episode_length == 0 {
            return bad("episode_length must be at least 1".into());
        }
        let n = self.nodes.len();
        for l in &self.links {
            if l.endpoints.0 >= n || l.endpoints.1 >= n {
                return bad(format!("link {} references a missing node", l.id));
            }
            if !(l.capacity > 0.0 && l.capacity.is_finite()) {
                return bad(format!("link {} needs a positive capacity", l.id));
            }
        }
        for g in &self.green_traffic {
            if g.link >= self.links.len() {
                return bad(format!("green flow on missing link {}", g.link));
            }
            if g.pattern.is_empty() || g.pattern.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return bad(format!(
                    "green flow on link {} needs a non-negative pattern",
                    g.link
                ));
            }
        }
        let check_attack = |target: Target, attack: &AttackKind, p: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "network spec: success probability {p} outside [0, 1]"
                )));
            }
            match (target, attack) {
                (Target::Node(i), AttackKind::Compromise) if i < n => Ok(()),
                (
                    Target::Link(l),
                    AttackKind::Flood {
                        load, ramp_load, ..
                    },
                ) if l < self.links.len() && *load >= 0.0 && *ramp_load >= 0.0 => Ok(()),
                _ => Err(Error::Config(format!(
                    "network spec: attack {attack:?} cannot target {target:?}"
                ))),
            }
        };
        for e in &self.red_schedule {
            check_attack(e.target, &e.attack, e.success_prob)?;
        }
        for r in &self.random_red {
            if r.onset_window.0 > r.onset_window.1 {
                return bad("random red onset window is reversed".into());
            }
            check_attack(r.target, &r.attack, r.success_prob)?;
        }
        Ok(())
    }

    fn green_demand(&self, link: usize, t: usize) -> f64 {
        self.green_traffic
            .iter()
            .filter(|g| g.link == link)
            .map(|g| g.pattern[t % g.pattern.len()])
            .sum()
    }

    fn total_green_demand(&self, t: usize) -> f64 {
        (0..self.links.len()).map(|l| self.green_demand(l, t)).sum()
    }
}

pub fn action_space_size(spec: &NetworkSpec) -> usize {
    1 + spec.nodes.len() + 2 * spec.links.len()
}

pub fn observation_size(spec: &NetworkSpec) -> usize {
    3 * spec.nodes.len() + 4 * spec.links.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlueAction {
    NoOp,
    Patch(usize),
    Block(usize),
    Unblock(usize),
}

impl BlueAction {
    pub fn decode(index: usize, spec: &NetworkSpec) -> Result<Self> {
        let (n, l) = (spec.nodes.len(), spec.links.len());
        match index {
            0 => Ok(BlueAction::NoOp),
            i if i <= n => Ok(BlueAction::Patch(i - 1)),
            i if i <= n + l => Ok(BlueAction::Block(i - 1 - n)),
            i if i <= n + 2 * l => Ok(BlueAction::Unblock(i - 1 - n - l)),
            index => Err(Error::InvalidAction {
                index,
                size: action_space_size(spec),
            }),
        }
    }

    pub fn encode(self, spec: &NetworkSpec) -> usize {
        let (n, l) = (spec.nodes.len(), spec.links.len());
        match self {
            BlueAction::NoOp => 0,
            BlueAction::Patch(i) => 1 + i,
            BlueAction::Block(k) => 1 + n + k,
            BlueAction::Unblock(k) => 1 + n + l + k,
        }
    }
}

/// A flood in progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ActiveFlood {
    link: usize,
    start: usize,
    attack: AttackKind,
}

impl ActiveFlood {
    fn live_at(&self, t: usize) -> bool {
        match self.attack {
            AttackKind::Flood { duration, .. } => t < self.start + duration,
            AttackKind::Compromise => false,
        }
    }

    fn load_at(&self, t: usize) -> f64 {
        match self.attack {
            AttackKind::Flood {
                duration,
                load,
                ramp_steps,
                ramp_load,
            } if t >= self.start && t < self.start + duration => {
                if t - self.start < ramp_steps {
                    ramp_load
                } else {
                    load
                }
            }
            _ => 0.0,
        }
    }
}

/// Full mutable state of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub nodes: Vec<NodeStatus>,
    pub blocked: Vec<bool>,
    /// Green plus red load offered to each link at the last routing step.
    pub offered_load: Vec<f64>,
    /// Green load delivered on each link at the last routing step.
    pub delivered_green: Vec<f64>,
    pub timestep: usize,
    floods: Vec<ActiveFlood>,
    random_onsets: Vec<usize>,
    rng: ChaCha8Rng,
}

/// Observable summary of what happened during one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub red: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CyberEnv {
    spec: NetworkSpec,
    base_seed: u64,
    episode: u64,
    state: EnvState,
    done: bool,
    events: StepEvents,
    total_reward: f64,
    episode_reward: f64,
}

/// Serializable snapshot of a [`CyberEnv`], used by checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub base_seed: u64,
    pub episode: u64,
    pub state: EnvState,
    pub done: bool,
    pub total_reward: f64,
    pub episode_reward: f64,
}

fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

impl CyberEnv {
    /// Build the environment and reset into episode 0 of `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let state = Self::initial_state(&spec, episode_rng(seed, 0));
        Ok(CyberEnv {
            spec,
            base_seed: seed,
            episode: 0,
            state,
            done: false,
            events: StepEvents::default(),
            total_reward: 0.0,
            episode_reward: 0.0,
        })
    }

    fn initial_state(spec: &NetworkSpec, mut rng: ChaCha8Rng) -> EnvState {
        let random_onsets = spec
            .random_red
            .iter()
            .map(|r| rng.gen_range(r.onset_window.0..=r.onset_window.1))
            .collect();
        let offered_load: Vec<f64> = (0..spec.links.len())
            .map(|l| spec.green_demand(l, 0))
            .collect();
        EnvState {
            nodes: spec.nodes.iter().map(|n| n.initial_status).collect(),
            blocked: vec![false; spec.links.len()],
            delivered_green: offered_load.clone(),
            offered_load,
            timestep: 0,
            floods: Vec::new(),
            random_onsets,
            rng,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn last_events(&self) -> &StepEvents {
        &self.events
    }

    /// Sum of every reward returned since construction.
    pub fn total_reward(&self) -> f64 {
        self.total_reward
    }

    pub fn episode_reward(&self) -> f64 {
        self.episode_reward
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            base_seed: self.base_seed,
            episode: self.episode,
            state: self.state.clone(),
            done: self.done,
            total_reward: self.total_reward,
            episode_reward: self.episode_reward,
        }
    }

    pub fn restore(spec: NetworkSpec, snap: EnvSnapshot) -> Result<Self> {
        spec.validate()?;
        if snap.state.nodes.len() != spec.nodes.len()
            || snap.state.blocked.len() != spec.links.len()
        {
            return Err(Error::Config(
                "environment snapshot does not match the network spec".into(),
            ));
        }
        Ok(CyberEnv {
            spec,
            base_seed: snap.base_seed,
            episode: snap.episode,
            state: snap.state,
            done: snap.done,
            events: StepEvents::default(),
            total_reward: snap.total_reward,
            episode_reward: snap.episode_reward,
        })
    }

    /// Restart with an explicit seed (episode counter returns to 0).
    pub fn reset_seeded(&mut self, seed: u64) -> Vec<u8> {
        self.base_seed = seed;
        self.episode = 0;
        self.restart()
    }

    fn restart(&mut self) -> Vec<u8> {
        self.state = Self::initial_state(&self.spec, episode_rng(self.base_seed, self.episode));
        self.done = false;
        self.events = StepEvents::default();
        self.episode_reward = 0.0;
        self.observe()
    }

    /// Binary observation: per node a one-hot of (healthy, compromised,
    /// patching); per link a blocked bit and a one-hot load band (offered
    /// load below half capacity, up to capacity, above capacity).
    pub fn observe(&self) -> Vec<u8> {
        let mut obs = Vec::with_capacity(observation_size(&self.spec));
        for status in &self.state.nodes {
            let c = status.code();
            obs.extend((0..3).map(|k| (k == c) as u8));
        }
        for (l, link) in self.spec.links.iter().enumerate() {
            obs.push(self.state.blocked[l] as u8);
            let ratio = self.state.offered_load[l] / link.capacity;
            let band = if ratio < 0.5 {
                0
            } else if ratio <= 1.0 {
                1
            } else {
                2
            };
            obs.extend((0..3).map(|k| (k == band) as u8));
        }
        obs
    }

    pub fn step_action(&mut self, action: BlueAction) -> Result<(Vec<u8>, f64, bool)> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let spec = &self.spec;
        let st = &mut self.state;
        let t = st.timestep;
        let mut events = StepEvents::default();

        match action {
            BlueAction::NoOp => {}
            BlueAction::Patch(i) => {
                if i >= spec.nodes.len() {
                    return Err(Error::InvalidAction {
                        index: action.encode(spec),
                        size: action_space_size(spec),
                    });
                }
                if !matches!(st.nodes[i], NodeStatus::Patching(_)) && spec.patch_duration > 0 {
                    st.nodes[i] = NodeStatus::Patching(spec.patch_duration);
                }
            }
            BlueAction::Block(l) | BlueAction::Unblock(l) => {
                if l >= spec.links.len() {
                    return Err(Error::InvalidAction {
                        index: action.encode(spec),
                        size: action_space_size(spec),
                    });
                }
                st.blocked[l] = matches!(action, BlueAction::Block(_));
            }
        }

        let mut fired: Vec<(Target, AttackKind, f64)> = spec
            .red_schedule
            .iter()
            .filter(|e| e.timestep == t)
            .map(|e| (e.target, e.attack, e.success_prob))
            .collect();
        for (agent, &onset) in spec.random_red.iter().zip(&st.random_onsets) {
            if onset == t {
                fired.push((agent.target, agent.attack, agent.success_prob));
            }
        }
        for (target, attack, p) in fired {
            let roll: f64 = st.rng.gen();
            let lands = roll < p;
            match (target, attack) {
                (Target::Node(i), AttackKind::Compromise) => {
                    if lands && st.nodes[i] == NodeStatus::Healthy {
                        st.nodes[i] = NodeStatus::Compromised;
                        events.red.push(format!("compromise:{}", spec.nodes[i].id));
                    }
                }
                (Target::Link(l), attack @ AttackKind::Flood { .. }) => {
                    if lands {
                        st.floods.push(ActiveFlood {
                            link: l,
                            start: t,
                            attack,
                        });
                        events.red.push(format!("flood:{}", spec.links[l].id));
                    }
                }
                _ => unreachable!("validated spec pairs targets and attacks"),
            }
        }
        st.floods.retain(|f| f.live_at(t));

        let mut delivered = 0.0;
        for (l, link) in spec.links.iter().enumerate() {
            let green = spec.green_demand(l, t);
            let red: f64 = st
                .floods
                .iter()
                .filter(|f| f.link == l)
                .map(|f| f.load_at(t))
                .sum();
            let offered = green + red;
            st.offered_load[l] = offered;
            st.delivered_green[l] = if st.blocked[l] || offered == 0.0 {
                0.0
            } else {
                green * (link.capacity / offered).min(1.0)
            };
            delivered += st.delivered_green[l];
            if !st.blocked[l] && red > 0.0 && offered > link.capacity {
                let victim = link.endpoints.1;
                if st.nodes[victim] == NodeStatus::Healthy {
                    st.nodes[victim] = NodeStatus::Compromised;
                    events
                        .red
                        .push(format!("overload:{}", spec.nodes[victim].id));
                }
            }
        }
        let demand = spec.total_green_demand(t);
        let green_fraction = if demand > 0.0 {
            delivered / demand
        } else {
            1.0
        };

        let w = &spec.reward;
        let mut reward = w.green * green_fraction;
        for status in &st.nodes {
            match status {
                NodeStatus::Healthy => reward += w.healthy,
                NodeStatus::Compromised => reward -= w.compromised,
                NodeStatus::Patching(_) => {}
            }
        }
        if action != BlueAction::NoOp {
            reward -= w.action;
        }

        st.timestep += 1;
        for status in &mut st.nodes {
            if let NodeStatus::Patching(k) = *status {
                *status = if k <= 1 {
                    NodeStatus::Healthy
                } else {
                    NodeStatus::Patching(k - 1)
                };
            }
        }
        self.done = st.timestep >= spec.episode_length;
        self.events = events;
        self.total_reward += reward;
        self.episode_reward += reward;
        Ok((self.observe(), reward, self.done))
    }

    /// Whether a flood on `link` will carry load at the current timestep,
    /// counting scheduled floods that launch now.
    fn flood_due(&self, link: usize) -> bool {
        let t = self.state.timestep;
        let starting = |target: Target, attack: AttackKind, onset: usize| {
            target == Target::Link(link)
                && ActiveFlood {
                    link,
                    start: onset,
                    attack,
                }
                .load_at(t)
                    > 0.0
        };
        self.state
            .floods
            .iter()
            .any(|f| f.link == link && f.load_at(t) > 0.0)
            || self
                .spec
                .red_schedule
                .iter()
                .any(|e| e.timestep == t && starting(e.target, e.attack, e.timestep))
            || self
                .spec
                .random_red
                .iter()
                .zip(&self.state.random_onsets)
                .any(|(r, &onset)| onset == t && starting(r.target, r.attack, onset))
    }

    /// Scripted defender with knowledge of the red schedule: block a link
    /// before a flood reaches it, otherwise patch the first compromised
    /// node, otherwise unblock a link whose flood is over.
    pub fn perfect_defense_action(&self) -> BlueAction {
        let n_links = self.spec.links.len();
        if let Some(l) = (0..n_links).find(|&l| !self.state.blocked[l] && self.flood_due(l)) {
            return BlueAction::Block(l);
        }
        if let Some(i) = self
            .state
            .nodes
            .iter()
            .position(|s| *s == NodeStatus::Compromised)
        {
            return BlueAction::Patch(i);
        }
        if let Some(l) = (0..n_links).find(|&l| self.state.blocked[l] && !self.flood_due(l)) {
            return BlueAction::Unblock(l);
        }
        BlueAction::NoOp
    }
}

impl Environment for CyberEnv {
    fn observation_size(&self) -> usize {
        observation_size(&self.spec)
    }

    fn action_count(&self) -> usize {
        action_space_size(&self.spec)
    }

    fn observation(&self) -> Vec<u8> {
        self.observe()
    }

    fn reset(&mut self) -> Vec<u8> {
        self.episode += 1;
        self.restart()
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        let action = BlueAction::decode(action, &self.spec)?;
        let (observation, reward, done) = self.step_action(action)?;
        Ok(Transition {
            observation,
            reward,
            done,
        })
    }
}

/// Per-timestep trace rows: episode, timestep, action, red events, node
/// statuses and reward.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record([
            "episode",
            "timestep",
            "action",
            "red_events",
            "node_statuses",
            "reward",
        ])?;
        Ok(TraceWriter { inner })
    }

    /// Record the step `env` just took (call right after stepping).
    pub fn record(&mut self, env: &CyberEnv, action: BlueAction, reward: f64) -> Result<()> {
        let statuses: String = env.state.nodes.iter().map(|s| s.label()).collect();
        self.inner.write_record([
            env.episode.to_string(),
            (env.state.timestep - 1).to_string(),
            format!("{action:?}"),
            env.events.red.join(";"),
            statuses,
            reward.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Episode return of the scripted defender on a fresh copy of `spec`.
pub fn perfect_defense_return(spec: &NetworkSpec, seed: u64) -> Result<f64> {
    run_scripted(spec, seed, |env| env.perfect_defense_action())
}

/// Episode return when blue never acts.
pub fn no_op_return(spec: &NetworkSpec, seed: u64) -> Result<f64> {
    run_scripted(spec, seed, |_| BlueAction::NoOp)
}

fn run_scripted(
    spec: &NetworkSpec,
    seed: u64,
    policy: impl Fn(&CyberEnv) -> BlueAction,
) -> Result<f64> {
    let mut env = CyberEnv::new(spec.clone(), seed)?;
    let mut total = 0.0;
    while !env.is_done() {
        let a = policy(&env);
        total += env.step_action(a)?.1;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::default_six_node();
        spec.red_schedule.clear();
        spec.random_red.clear();
        spec
    }

    #[test]
    fn reset_is_all_healthy() {
        let env = CyberEnv::new(NetworkSpec::default_six_node(), 1).unwrap();
        let obs = env.observe();
        for n in 0..6 {
            assert_eq!(&obs[3 * n..3 * n + 3], &[1, 0, 0]);
        }
        assert_eq!(obs.len(), 3 * 6 + 4 * 7);
        assert_eq!(obs.len(), observation_size(env.spec()));
    }

    #[test]
    fn reset_is_deterministic() {
        let a = CyberEnv::new(NetworkSpec::default_six_node(), 9).unwrap();
        let b = CyberEnv::new(NetworkSpec::default_six_node(), 9).unwrap();
        assert_eq!(a.observe(), b.observe());
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn quiet_no_op_reward() {
        let mut env = CyberEnv::new(quiet_spec(), 0).unwrap();
        let (_, r, done) = env.step_action(BlueAction::NoOp).unwrap();
        assert!((r - 7.0).abs() < 1e-12);
        assert!(!done);
    }

    #[test]
    fn patching_restores_health_after_duration() {
        let mut spec = quiet_spec();
        spec.nodes[2].initial_status = NodeStatus::Compromised;
        let mut env = CyberEnv::new(spec, 0).unwrap();
        env.step_action(BlueAction::Patch(2)).unwrap();
        assert_eq!(env.state().nodes[2], NodeStatus::Patching(1));
        env.step_action(BlueAction::NoOp).unwrap();
        assert_eq!(env.state().nodes[2], NodeStatus::Healthy);
    }

    #[test]
    fn patching_node_gives_no_health_reward() {
        let mut env = CyberEnv::new(quiet_spec(), 0).unwrap();
        let (_, r, _) = env.step_action(BlueAction::Patch(0)).unwrap();
        assert!((r - (5.0 + 1.0 - 0.1)).abs() < 1e-12);
    }

    fn statuses(env: &CyberEnv) -> String {
        env.state().nodes.iter().map(|s| s.label()).collect()
    }

    #[test]
    fn deterministic_schedule_matches_hand_trace() {
        // Hand simulation with no-op blue, nodes (pc1 pc2 server sw1 sw2 sw3):
        // t3 pc1 compromised; t6 flood ramps on switch3-server (0.4+0.3, no
        // overload); t7 overload compromises server; t12 pc2 compromised;
        // t18 ramp on switch1-switch3, t19 overload compromises switch3.
        let mut env = CyberEnv::new(NetworkSpec::default_deterministic(), 4).unwrap();
        let expected: Vec<(usize, &str)> = vec![
            (2, "HHHHHH"),
            (3, "CHHHHH"),
            (6, "CHHHHH"),
            (7, "CHCHHH"),
            (12, "CCCHHH"),
            (18, "CCCHHH"),
            (19, "CCCHHC"),
            (29, "CCCHHC"),
        ];
        let mut after = Vec::new();
        while !env.is_done() {
            env.step_action(BlueAction::NoOp).unwrap();
            after.push(statuses(&env));
        }
        for (t, s) in expected {
            assert_eq!(after[t], s, "after step {t}");
        }
    }

    #[test]
    fn ramp_is_visible_before_overload() {
        let mut env = CyberEnv::new(NetworkSpec::default_deterministic(), 0).unwrap();
        for _ in 0..7 {
            env.step_action(BlueAction::NoOp).unwrap();
        }
        // after step 6 the switch3-server link shows the medium band
        let obs = env.observe();
        let base = 18 + 4 * 4;
        assert_eq!(&obs[base..base + 4], &[0, 0, 1, 0]);
    }

    #[test]
    fn action_space_arithmetic() {
        let spec = NetworkSpec::default_six_node();
        assert_eq!(action_space_size(&spec), 21);
        let mut small = quiet_spec();
        small.nodes.truncate(2);
        small.links = vec![LinkSpec {
            id: "l".into(),
            endpoints: (0, 1),
            capacity: 1.0,
        }];
        small.green_traffic.clear();
        assert_eq!(observation_size(&small), 10);
        assert_eq!(action_space_size(&small), 1 + 2 + 2);
    }

    #[test]
    fn sizes_match_structural_walk() {
        let spec = NetworkSpec::default_six_node();
        let env = CyberEnv::new(spec.clone(), 0).unwrap();
        // walk the observation structure field by field
        let mut len = 0;
        for _ in &env.state().nodes {
            len += [
                NodeStatus::Healthy,
                NodeStatus::Compromised,
                NodeStatus::Patching(1),
            ]
            .len();
        }
        for _ in &env.state().blocked {
            len += 1 + ["low", "medium", "high"].len();
        }
        assert_eq!(len, observation_size(&spec));
        let mut actions = vec![BlueAction::NoOp];
        actions.extend((0..spec.nodes.len()).map(BlueAction::Patch));
        actions.extend((0..spec.links.len()).map(BlueAction::Block));
        actions.extend((0..spec.links.len()).map(BlueAction::Unblock));
        assert_eq!(actions.len(), action_space_size(&spec));
        for (i, a) in actions.iter().enumerate() {
            assert_eq!(a.encode(&spec), i);
            assert_eq!(BlueAction::decode(i, &spec).unwrap(), *a);
        }
    }

    #[test]
    fn out_of_range_action_errors() {
        let mut env = CyberEnv::new(NetworkSpec::default_six_node(), 0).unwrap();
        assert!(matches!(
            env.step(21),
            Err(Error::InvalidAction {
                index: 21,
                size: 21
            })
        ));
    }

    #[test]
    fn stepping_after_done_errors() {
        let mut spec = quiet_spec();
        spec.episode_length = 1;
        let mut env = CyberEnv::new(spec, 0).unwrap();
        assert!(env.step(0).unwrap().done);
        assert!(matches!(env.step(0), Err(Error::EpisodeDone)));
        env.reset();
        assert!(env.step(0).is_ok());
    }

    #[test]
    fn blocking_drops_link_delivery_to_zero() {
        let mut env = CyberEnv::new(quiet_spec(), 0).unwrap();
        let (_, r, _) = env.step_action(BlueAction::Block(3)).unwrap();
        assert_eq!(env.state().delivered_green[3], 0.0);
        assert!((r - (6.0 + 6.0 / 7.0 - 0.1)).abs() < 1e-12);
        env.step_action(BlueAction::Unblock(3)).unwrap();
        assert!((env.state().delivered_green[3] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = quiet_spec();
        s.links[0].endpoints = (0, 17);
        assert!(CyberEnv::new(s, 0).is_err());
        let mut s = quiet_spec();
        s.links[0].capacity = 0.0;
        assert!(s.validate().is_err());
        let mut s = quiet_spec();
        s.episode_length = 0;
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::default_six_node();
        s.red_schedule[0].target = Target::Link(0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn oracle_beats_no_op() {
        let spec = NetworkSpec::default_six_node();
        for seed in 0..5 {
            assert!(
                perfect_defense_return(&spec, seed).unwrap() > no_op_return(&spec, seed).unwrap()
            );
        }
        let det = NetworkSpec::default_deterministic();
        assert!(perfect_defense_return(&det, 0).unwrap() > no_op_return(&det, 0).unwrap() + 50.0);
    }

    #[test]
    fn zero_success_never_blocking_policies_get_full_green() {
        let mut spec = NetworkSpec::default_six_node();
        for e in &mut spec.red_schedule {
            e.success_prob = 0.0;
        }
        spec.random_red[0].success_prob = 0.0;
        for policy_seed in 0..3u64 {
            let mut env = CyberEnv::new(spec.clone(), policy_seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
            while !env.is_done() {
                let a = if rng.gen_bool(0.3) {
                    BlueAction::Patch(rng.gen_range(0..6))
                } else {
                    BlueAction::NoOp
                };
                env.step_action(a).unwrap();
                let delivered: f64 = env.state().delivered_green.iter().sum();
                assert!((delivered - 7.0 * 0.4).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rewards_within_bounds() {
        let spec = NetworkSpec::default_six_node();
        let w = spec.reward;
        let (lo, hi) = (
            -w.compromised * 6.0 - w.action,
            w.healthy * 6.0 + w.green * 7.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut env = CyberEnv::new(spec, 3).unwrap();
        for _ in 0..20 {
            let mut total = 0.0;
            while !env.is_done() {
                let r = env.step(rng.gen_range(0..21)).unwrap().reward;
                assert!(r >= lo && r <= hi);
                total += r;
            }
            assert!(total >= 30.0 * lo && total <= 30.0 * hi);
            env.reset();
        }
    }

    #[test]
    fn snapshot_restore_continues_identically() {
        let mut a = CyberEnv::new(NetworkSpec::default_six_node(), 5).unwrap();
        for k in 0..10 {
            a.step(k % 21).unwrap();
        }
        let mut b = CyberEnv::restore(a.spec().clone(), a.snapshot()).unwrap();
        for k in 0..15 {
            assert_eq!(a.step(k % 21).unwrap(), b.step(k % 21).unwrap());
        }
        let json = serde_json::to_string(&a.snapshot()).unwrap();
        let back: EnvSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a.snapshot());
    }

    #[test]
    fn trace_rows() {
        let mut env = CyberEnv::new(NetworkSpec::default_deterministic(), 0).unwrap();
        let mut buf = Vec::new();
        {
            let mut tw = TraceWriter::new(&mut buf).unwrap();
            for _ in 0..4 {
                let (_, r, _) = env.step_action(BlueAction::NoOp).unwrap();
                tw.record(&env, BlueAction::NoOp, r).unwrap();
            }
            tw.flush().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "0,3,NoOp,compromise:pc1,CHHHHH,4");
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = NetworkSpec::default_six_node();
        let text = toml::to_string(&spec).unwrap();
        let back: NetworkSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
