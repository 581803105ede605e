//! Discrete-event simulation of many agents sharing chains over a network.
//!
//! Every agent fires a share event once per interval `T`. An epoch ends when
//! every active agent has fired once; convergence is measured in epochs.
//! Agents come in two fidelities: [`Fidelity::Abstract`] tracks only who is
//! in each partial block and scripts attestation outcomes, which is fast
//! enough for thousands of agents; [`Fidelity::Concrete`] runs real
//! [`AgentState`]s with trained models and signed records.

mod abstract_node;
mod concrete;
mod engine;
mod topology;

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use concrete::{build_agents, train_model};
pub use topology::{gen_barabasi_albert, gen_complete, gen_watts_strogatz, DegreeStats, SmallWorld, Topology};

use crate::agent::AgentState;
use crate::chain::ProtocolParams;
use crate::emm::State;
use crate::error::{Error, Result};
use crate::traces::GeneratorConfig;
use abstract_node::{AbstractNode, Members};
use concrete::ConcreteNode;
use engine::Engine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Fire `k` happens at `phase + k * T` plus jitter; jitter never accumulates.
    #[default]
    Anchored,
    /// Each fire is scheduled `T` plus jitter after the previous one.
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    /// Chains arrive as soon as they are sent.
    #[default]
    Immediate,
    /// Chains wait in the receiver's inbox until its next share event.
    NextShare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    #[default]
    Abstract,
    Concrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignerKind {
    #[default]
    KeyedHash,
    Ed25519,
}

/// Settings used only by concrete agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcreteConfig {
    pub generator: GeneratorConfig,
    /// Length of each agent's benign training trace.
    pub train_steps: usize,
    pub signer: SignerKind,
}

impl Default for ConcreteConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig {
                regions: 6,
                out_degree: 2,
                ..GeneratorConfig::default()
            },
            train_steps: 2000,
            signer: SignerKind::KeyedHash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    #[default]
    None,
    /// A fraction of agents, picked by seed, start with extra malicious
    /// transitions `[from, to, count]` in their local models.
    PoisonedAgents {
        fraction: f64,
        transitions: Vec<[State; 3]>,
    },
    /// The listed agents take no part before `join_epoch`.
    LateJoin { agents: Vec<u32>, join_epoch: u64 },
    NoDirectMessaging,
}

impl Scenario {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        match self {
            Scenario::PoisonedAgents { fraction, .. } if !(0.0..=1.0).contains(fraction) => Err(
                Error::InvalidParameter(format!("poisoned fraction must lie in [0, 1], got {fraction}")),
            ),
            Scenario::LateJoin { agents, .. } => match agents.iter().find(|&&a| a as usize >= n_agents) {
                Some(a) => Err(Error::InvalidParameter(format!("late-join agent {a} outside 0..{n_agents}"))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Ids of the poisoned agents, ascending.
    pub fn poisoned(&self, n_agents: usize, seed: u64) -> Vec<u32> {
        match self {
            Scenario::PoisonedAgents { fraction, .. } => {
                let count = (fraction * n_agents as f64).round() as usize;
                concrete::poisoned_ids(n_agents, count, seed)
            }
            _ => Vec::new(),
        }
    }

    pub fn join_epochs(&self, n_agents: usize) -> Vec<u64> {
        let mut out = vec![0; n_agents];
        if let Scenario::LateJoin { agents, join_epoch } = self {
            for &a in agents {
                out[a as usize] = *join_epoch;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_agents: usize,
    /// Block size `L`.
    pub block_size: usize,
    /// Share interval `T` in seconds.
    pub interval_secs: f64,
    /// Each event time gets uniform noise in `[0, jitter * T)`.
    pub jitter: f64,
    /// Initial phases are uniform in `[0, phase_spread * T)`.
    pub phase_spread: f64,
    pub schedule: ScheduleMode,
    pub delivery: Delivery,
    /// Neighbours sent to per share event; `None` sends to all.
    pub fanout: Option<usize>,
    pub seed: u64,
    pub k_dm: u32,
    pub alpha: f64,
    pub p_a: f64,
    pub report_factor: f64,
    pub direct_messaging: bool,
    pub max_epochs: u64,
    /// Stop after this many blocks close.
    pub blocks_to_close: usize,
    /// Consecutive epochs without any change that count as a deadlock.
    pub stall_epochs: u32,
    pub fidelity: Fidelity,
    pub scenario: Scenario,
    pub concrete: ConcreteConfig,
    /// Record every partial block at each epoch boundary.
    pub trace_epochs: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_agents: 100,
            block_size: 20,
            interval_secs: 60.0,
            jitter: 0.01,
            phase_spread: 1.0,
            schedule: ScheduleMode::Anchored,
            delivery: Delivery::Immediate,
            fanout: None,
            seed: 0,
            k_dm: 1,
            alpha: 0.05,
            p_a: 0.25,
            report_factor: 2.0,
            direct_messaging: true,
            max_epochs: 100_000,
            blocks_to_close: 1,
            stall_epochs: 3,
            fidelity: Fidelity::Abstract,
            scenario: Scenario::None,
            concrete: ConcreteConfig::default(),
            trace_epochs: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_agents < 2 {
            return bad(format!("need at least 2 agents, got {}", self.n_agents));
        }
        if self.block_size == 0 || self.block_size > self.n_agents {
            return bad(format!(
                "block size must lie in [1, n_agents = {}], got {}",
                self.n_agents, self.block_size
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return bad(format!("jitter must lie in [0, 1), got {}", self.jitter));
        }
        if !(0.0..=1.0).contains(&self.phase_spread) {
            return bad(format!("phase_spread must lie in [0, 1], got {}", self.phase_spread));
        }
        if self.fanout == Some(0) {
            return bad("fanout must be positive".into());
        }
        if !(0.0..1.0).contains(&self.p_a) {
            return bad(format!("p_a must lie in [0, 1), got {}", self.p_a));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.blocks_to_close == 0 || self.stall_epochs == 0 || self.max_epochs == 0 {
            return bad("blocks_to_close, stall_epochs and max_epochs must be positive".into());
        }
        self.scenario.validate(self.n_agents)?;
        self.protocol().validate()
    }

    /// Protocol settings every agent runs with.
    pub fn protocol(&self) -> ProtocolParams {
        ProtocolParams {
            block_size: self.block_size,
            interval_secs: self.interval_secs,
            peer_budget: None,
            k_dm: self.k_dm,
            report_factor: self.report_factor,
            direct_messaging: self.direct_messaging && self.scenario != Scenario::NoDirectMessaging,
        }
    }
}

/// The state of the network at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: u64,
    /// Whether any agent changed its chain during the epoch.
    pub changed: bool,
    pub partials: Vec<PbSnapshot>,
}

/// One agent's partial block at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PbSnapshot {
    pub agent: u32,
    pub blocks: usize,
    pub members: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub agent: u32,
    pub blocks: usize,
    pub partial_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    /// Epochs taken by each closed block, counting the closing epoch.
    pub epochs_to_close: Vec<u64>,
    /// Share events the closing agent had fired when each block closed.
    pub closing_fire_counts: Vec<u64>,
    /// Broadcast and direct chain transmissions.
    pub messages_sent: u64,
    /// Messages to agents that had not joined yet or had no receive budget.
    pub dropped: u64,
    pub replacements: u64,
    pub direct_messages: u64,
    pub reports: u64,
    pub reported_agents: BTreeSet<u32>,
    pub degree_stats: DegreeStats,
    pub deadlock_detected: bool,
    /// Every partial block at the moment a deadlock was declared.
    pub deadlock_dump: Option<Vec<PbSnapshot>>,
    pub epochs_run: u64,
    pub final_chains: Vec<ChainSummary>,
    /// Filled only when [`SimConfig::trace_epochs`] is set.
    pub epoch_trace: Vec<EpochSnapshot>,
}

impl SimMetrics {
    pub(crate) fn new(topo: &Topology) -> Self {
        Self {
            epochs_to_close: Vec::new(),
            closing_fire_counts: Vec::new(),
            messages_sent: 0,
            dropped: 0,
            replacements: 0,
            direct_messages: 0,
            reports: 0,
            reported_agents: BTreeSet::new(),
            degree_stats: topo.degree_stats(),
            deadlock_detected: false,
            deadlock_dump: None,
            epochs_run: 0,
            final_chains: Vec::new(),
            epoch_trace: Vec::new(),
        }
    }

    pub fn closed(&self) -> bool {
        !self.epochs_to_close.is_empty()
    }
}

/// The deadlock predicate over two consecutive epoch snapshots: no partial
/// block changed and none has reached `block_size`.
pub fn deadlock_oracle(before: &[PbSnapshot], after: &[PbSnapshot], block_size: usize) -> Result<bool> {
    let index = |s: &[PbSnapshot]| -> Result<BTreeMap<u32, (usize, Vec<u32>)>> {
        let mut m = BTreeMap::new();
        for p in s {
            let mut members = p.members.clone();
            members.sort_unstable();
            if m.insert(p.agent, (p.blocks, members)).is_some() {
                return Err(Error::InvalidInput(format!("agent {} appears twice in a snapshot", p.agent)));
            }
        }
        Ok(m)
    };
    let (b, a) = (index(before)?, index(after)?);
    if !b.keys().eq(a.keys()) {
        return Err(Error::InvalidInput("snapshots cover different agents".into()));
    }
    Ok(b == a && a.values().all(|(_, m)| m.len() < block_size))
}

/// Applies the configured scenario to freshly built agents.
pub fn apply_scenario(cfg: &SimConfig, mut agents: Vec<AgentState>) -> Result<Vec<AgentState>> {
    cfg.scenario.validate(agents.len())?;
    match &cfg.scenario {
        Scenario::PoisonedAgents { transitions, .. } => {
            for id in cfg.scenario.poisoned(agents.len(), cfg.seed) {
                let model = &mut agents[id as usize].local_model;
                for &[from, to, count] in transitions {
                    model.add_count(from, to, count);
                }
            }
        }
        Scenario::NoDirectMessaging => {
            for a in &mut agents {
                a.protocol.direct_messaging = false;
            }
        }
        Scenario::None | Scenario::LateJoin { .. } => {}
    }
    Ok(agents)
}

fn check_inputs(cfg: &SimConfig, topo: &Topology, agents: usize) -> Result<()> {
    cfg.validate()?;
    if topo.n() != cfg.n_agents || agents != cfg.n_agents {
        return Err(Error::InvalidParameter(format!(
            "config has {} agents but topology has {} and {} agents were supplied",
            cfg.n_agents,
            topo.n(),
            agents
        )));
    }
    topo.require_connected()
}

/// Runs concrete agents to completion and returns them with the metrics.
pub fn run_agents(cfg: &SimConfig, topo: &Topology, agents: Vec<AgentState>) -> Result<(SimMetrics, Vec<AgentState>)> {
    check_inputs(cfg, topo, agents.len())?;
    let nodes = agents.into_iter().map(|agent| ConcreteNode { agent }).collect();
    let (metrics, nodes) = Engine::new(cfg, topo, nodes, cfg.scenario.join_epochs(cfg.n_agents)).run()?;
    Ok((metrics, nodes.into_iter().map(|n| n.agent).collect()))
}

pub fn run_simulation(cfg: &SimConfig, topo: &Topology) -> Result<SimMetrics> {
    check_inputs(cfg, topo, cfg.n_agents)?;
    match cfg.fidelity {
        Fidelity::Concrete => {
            let agents = apply_scenario(cfg, build_agents(cfg)?)?;
            run_agents(cfg, topo, agents).map(|(m, _)| m)
        }
        Fidelity::Abstract => {
            let n = cfg.n_agents;
            let mut poisoned = Members::new(n);
            for id in cfg.scenario.poisoned(n, cfg.seed) {
                poisoned.insert(id);
            }
            let poisoned = Rc::new(poisoned);
            let protocol = Rc::new(cfg.protocol());
            let nodes = (0..n as u32)
                .map(|i| AbstractNode::new(i, n, Rc::clone(&poisoned), Rc::clone(&protocol), cfg.alpha, cfg.p_a))
                .collect();
            Engine::new(cfg, topo, nodes, cfg.scenario.join_epochs(n)).run().map(|(m, _)| m)
        }
    }
}

/// Network family regenerated for every trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    Complete,
    WattsStrogatz {
        neighbors: usize,
        p: f64,
        #[serde(default)]
        variant: SmallWorld,
    },
    BarabasiAlbert { attachment: usize },
}

impl TopologySpec {
    pub fn build(&self, n: usize, seed: u64) -> Result<Topology> {
        match *self {
            TopologySpec::Complete => gen_complete(n),
            TopologySpec::WattsStrogatz { neighbors, p, variant } => gen_watts_strogatz(n, neighbors, p, seed, variant),
            TopologySpec::BarabasiAlbert { attachment } => gen_barabasi_albert(n, attachment, seed),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TopologySpec::Complete => "complete".into(),
            TopologySpec::WattsStrogatz { neighbors, p, .. } => format!("ws({neighbors},{p})"),
            TopologySpec::BarabasiAlbert { attachment } => format!("ba({attachment})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: u64,
    pub seed: u64,
    pub generator: String,
    pub n: usize,
    pub block_size: usize,
    /// Epochs until the first block closed; `None` on deadlock.
    pub epochs: Option<u64>,
    pub messages: u64,
    pub deadlock: bool,
    pub degree_stats: DegreeStats,
}

/// Seed used by trial `trial` of a batch started from `base`.
pub fn trial_seed(base: u64, trial: u64) -> u64 {
    base.wrapping_add(trial)
}

/// Runs `trials` independent simulations in parallel, each on a freshly
/// generated network. Results are sorted by trial id.
pub fn run_trials(cfg: &SimConfig, spec: &TopologySpec, trials: u64) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let mut out = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(cfg.seed, trial);
            let cfg = SimConfig { seed, ..cfg.clone() };
            let topo = spec.build(cfg.n_agents, seed)?;
            let m = run_simulation(&cfg, &topo)?;
            Ok(TrialResult {
                trial,
                seed,
                generator: spec.name(),
                n: cfg.n_agents,
                block_size: cfg.block_size,
                epochs: m.epochs_to_close.first().copied(),
                messages: m.messages_sent,
                deadlock: m.deadlock_detected,
                degree_stats: m.degree_stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|t| t.trial);
    Ok(out)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

/// Aggregate over a batch of trials: degree statistics averaged across
/// networks and epochs over the trials that closed a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub deadlocks: usize,
    pub degree_min: Option<f64>,
    pub degree_max: Option<f64>,
    pub degree_median: Option<f64>,
    pub degree_mean: Option<f64>,
    pub degree_std: Option<f64>,
    pub epochs: Option<MeanStd>,
}

impl TrialSummary {
    pub fn of(results: &[TrialResult]) -> Self {
        let avg = |f: fn(&DegreeStats) -> f64| {
            MeanStd::of(&results.iter().map(|r| f(&r.degree_stats)).collect::<Vec<_>>()).map(|m| m.mean)
        };
        let epochs: Vec<f64> = results.iter().filter_map(|r| r.epochs).map(|e| e as f64).collect();
        Self {
            trials: results.len(),
            deadlocks: results.iter().filter(|r| r.deadlock).count(),
            degree_min: avg(|d| d.min as f64),
            degree_max: avg(|d| d.max as f64),
            degree_median: avg(|d| d.median),
            degree_mean: avg(|d| d.mean),
            degree_std: avg(|d| d.std),
            epochs: MeanStd::of(&epochs),
        }
    }
}
