//! What an agent does with a chain it receives.
//!
//! The decision procedure is written once, generically, in [`decide`]. It
//! only needs to know chain and partial-block lengths and membership
//! ([`ChainCandidate`]) and to be able to ask whether the incoming content is
//! valid and how far its combined model is from the local one
//! ([`CandidateChecks`]). [`receive_chain`] instantiates it over real signed
//! chains; the simulator instantiates it over compact membership sets.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AgentId, Chain, Verifier};
use crate::agent::AgentState;
use crate::emm::{distance, FrequencyMatrix};
use crate::error::{Error, Result};

/// Collaboration settings shared by all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    /// Records per block, `L`.
    pub block_size: usize,
    /// Share interval `T` in seconds.
    pub interval_secs: f64,
    /// Chains sent per share event, and chains processed per interval.
    /// `None` means every neighbour and no receive limit.
    pub peer_budget: Option<usize>,
    /// Direct-message on the `k_dm`-th unused equal-length chain.
    pub k_dm: u32,
    /// Rejections at distance `>= report_factor * alpha` are reported.
    pub report_factor: f64,
    pub direct_messaging: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            block_size: 20,
            interval_secs: 60.0,
            peer_budget: None,
            k_dm: 1,
            report_factor: 2.0,
            direct_messaging: true,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.block_size == 0 {
            return bad("block_size must be positive".into());
        }
        if !(self.interval_secs > 0.0) {
            return bad(format!("interval_secs must be positive, got {}", self.interval_secs));
        }
        if self.peer_budget == Some(0) {
            return bad("peer_budget must be positive".into());
        }
        if self.k_dm == 0 {
            return bad("k_dm must be at least 1".into());
        }
        if !(self.report_factor >= 1.0) {
            return bad(format!("report_factor must be >= 1, got {}", self.report_factor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReportReason {
    /// The chain is structurally broken (indices, hash links, app id).
    Malformed(String),
    /// The partial block failed signature or format checks.
    InvalidPartial,
    /// The partial block's combined model is far from the local model.
    Attestation { distance: f64 },
}

impl fmt::Display for ReportReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportReason::Malformed(m) => write!(f, "malformed chain ({m})"),
            ReportReason::InvalidPartial => f.write_str("invalid partial block"),
            ReportReason::Attestation { distance } => {
                write!(f, "attestation failed (distance {distance:.6})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    /// Take the incoming chain; its partial block is longer and trusted.
    ReplaceChain,
    /// Take the incoming chain, which has more blocks, and adopt its last
    /// block's combined model.
    ReplaceChainAndAdopt,
    Discard,
    /// Send the local chain straight to these agents.
    DirectMessage(Vec<AgentId>),
    /// Discard, and report the sender.
    Report { sender: AgentId, reason: ReportReason },
}

/// The shape of a chain as the decision procedure sees it.
pub trait ChainCandidate {
    /// Number of closed blocks.
    fn block_count(&self) -> usize;
    fn partial_len(&self) -> usize;
    fn partial_contains(&self, agent: AgentId) -> bool;
    fn same_partial_agents(&self, other: &Self) -> bool;
    /// Agents in this partial block that are absent from `other`'s.
    fn partial_agents_missing_from(&self, other: &Self) -> Vec<AgentId>;

    fn effective_length(&self, viewer: AgentId) -> usize {
        self.partial_len() - usize::from(self.partial_contains(viewer))
    }
}

/// Content checks on an incoming chain. Each is asked at most once.
pub trait CandidateChecks {
    fn last_block_valid(&mut self) -> bool;
    fn partial_valid(&mut self) -> bool;
    /// Distance from the local model to the incoming partial block's combined model.
    fn partial_distance(&mut self) -> f64;
}

/// Decides what to do with `incoming`, received by `viewer` from `sender`.
///
/// `equal_seen` counts qualifying equal-length chains since the last share
/// event; it is advanced here and reset on replacement.
#[allow(clippy::too_many_arguments)]
pub fn decide<C: ChainCandidate, K: CandidateChecks>(
    viewer: AgentId,
    sender: AgentId,
    local: &C,
    incoming: &C,
    params: &ProtocolParams,
    alpha: f64,
    equal_seen: &mut u32,
    checks: &mut K,
) -> Decision {
    use std::cmp::Ordering::*;
    match incoming.block_count().cmp(&local.block_count()) {
        Less => Decision::Discard,
        Greater => {
            if checks.last_block_valid() && checks.partial_valid() {
                *equal_seen = 0;
                Decision::ReplaceChainAndAdopt
            } else {
                Decision::Discard
            }
        }
        Equal => {
            let mine = local.effective_length(viewer);
            let theirs = incoming.effective_length(viewer);
            let report = |reason| Decision::Report { sender, reason };
            if theirs > mine {
                if !checks.partial_valid() {
                    return report(ReportReason::InvalidPartial);
                }
                let d = checks.partial_distance();
                if d < alpha {
                    *equal_seen = 0;
                    return Decision::ReplaceChain;
                }
                if d >= params.report_factor * alpha {
                    return report(ReportReason::Attestation { distance: d });
                }
                Decision::Discard
            } else if theirs == mine
                && params.direct_messaging
                && !incoming.same_partial_agents(local)
            {
                if !checks.partial_valid() {
                    return report(ReportReason::InvalidPartial);
                }
                *equal_seen += 1;
                if *equal_seen == params.k_dm {
                    Decision::DirectMessage(incoming.partial_agents_missing_from(local))
                } else {
                    Decision::Discard
                }
            } else {
                Decision::Discard
            }
        }
    }
}

/// Fixed-window limiter: at most `budget` chains per `interval` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct RateLimiter {
    budget: Option<usize>,
    interval: f64,
    window_start: f64,
    used: usize,
}

impl RateLimiter {
    pub fn new(budget: Option<usize>, interval: f64) -> Self {
        Self {
            budget,
            interval,
            window_start: f64::NEG_INFINITY,
            used: 0,
        }
    }

    pub fn try_acquire(&mut self, now: f64) -> bool {
        let Some(budget) = self.budget else {
            return true;
        };
        if now - self.window_start >= self.interval {
            self.window_start = now;
            self.used = 0;
        }
        if self.used < budget {
            self.used += 1;
            true
        } else {
            false
        }
    }
}

/// Per-agent receive bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiveState {
    pub equal_seen: u32,
    pub limiter: RateLimiter,
}

impl ReceiveState {
    pub fn new(params: &ProtocolParams) -> Self {
        Self {
            equal_seen: 0,
            limiter: RateLimiter::new(params.peer_budget, params.interval_secs),
        }
    }

    /// Called at each share event.
    pub fn start_interval(&mut self) {
        self.equal_seen = 0;
    }
}

impl ChainCandidate for Chain {
    fn block_count(&self) -> usize {
        self.blocks.len()
    }

    fn partial_len(&self) -> usize {
        self.partial.len()
    }

    fn partial_contains(&self, agent: AgentId) -> bool {
        self.partial.contains(agent)
    }

    fn same_partial_agents(&self, other: &Self) -> bool {
        let mut a: Vec<_> = self.partial.agents().collect();
        let mut b: Vec<_> = other.partial.agents().collect();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }

    fn partial_agents_missing_from(&self, other: &Self) -> Vec<AgentId> {
        self.partial
            .agents()
            .filter(|&a| !other.partial.contains(a))
            .collect()
    }
}

struct SignedChecks<'a> {
    incoming: &'a Chain,
    local_model: &'a FrequencyMatrix,
    verifier: Verifier<'a>,
    block_size: usize,
    p_a: f64,
}

impl CandidateChecks for SignedChecks<'_> {
    fn last_block_valid(&mut self) -> bool {
        self.incoming
            .last_block()
            .is_some_and(|b| b.validate(self.block_size, self.verifier).is_ok())
    }

    fn partial_valid(&mut self) -> bool {
        self.incoming.partial.validate(self.block_size, self.verifier).is_ok()
    }

    fn partial_distance(&mut self) -> f64 {
        match self.incoming.partial.combined_model(self.p_a) {
            Ok(m) => distance(self.local_model, &m),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Processes a chain received from `sender` and applies the outcome to the
/// agent: replacing its chain, adopting a global model, or leaving it
/// unchanged. Direct messages and reports are returned for the caller to
/// carry out.
///
/// Fails with [`Error::RateLimited`] once the agent has already processed
/// its budget of chains in the current interval.
pub fn receive_chain(
    agent: &mut AgentState,
    incoming: &Arc<Chain>,
    sender: AgentId,
    now: f64,
) -> Result<Decision> {
    if !agent.receive.limiter.try_acquire(now) {
        return Err(Error::RateLimited { agent: agent.id.0 });
    }
    if let Err(fault) = incoming.check_linkage() {
        return Ok(Decision::Report {
            sender,
            reason: ReportReason::Malformed(fault.to_string()),
        });
    }
    let (ours, theirs) = (&agent.chain.partial.meta, &incoming.partial.meta);
    if ours.app_id != theirs.app_id || ours.app_version != theirs.app_version {
        return Ok(Decision::Report {
            sender,
            reason: ReportReason::Malformed(format!(
                "application {}/{} does not match {}/{}",
                theirs.app_id, theirs.app_version, ours.app_id, ours.app_version
            )),
        });
    }

    let mut equal_seen = agent.receive.equal_seen;
    let decision = {
        let mut checks = SignedChecks {
            incoming,
            local_model: &agent.local_model,
            verifier: agent.verifier(),
            block_size: agent.protocol.block_size,
            p_a: agent.params.p_a,
        };
        decide(
            agent.id,
            sender,
            agent.chain.as_ref(),
            incoming.as_ref(),
            &agent.protocol,
            agent.params.alpha,
            &mut equal_seen,
            &mut checks,
        )
    };
    agent.receive.equal_seen = equal_seen;

    match &decision {
        Decision::ReplaceChain => agent.chain = Arc::clone(incoming),
        Decision::ReplaceChainAndAdopt => {
            agent.chain = Arc::clone(incoming);
            let block = agent.chain.last_block().expect("longer chain has a block").clone();
            agent.adopt_unchecked(&block);
        }
        _ => {}
    }
    Ok(decision)
}
