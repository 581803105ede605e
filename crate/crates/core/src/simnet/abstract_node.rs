//! Fast agents that track only partial-block membership.

use std::rc::Rc;

use super::engine::{Node, ShareEffect};
use crate::chain::{decide, AgentId, CandidateChecks, ChainCandidate, Decision, ProtocolParams};
use crate::error::Result;

/// Fixed-size bit set of agent ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Members {
    words: Box<[u64]>,
    len: usize,
}

impl Members {
    pub fn new(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)].into_boxed_slice(),
            len: 0,
        }
    }

    pub fn contains(&self, i: u32) -> bool {
        self.words[(i / 64) as usize] >> (i % 64) & 1 == 1
    }

    pub fn insert(&mut self, i: u32) -> bool {
        let w = &mut self.words[(i / 64) as usize];
        let bit = 1u64 << (i % 64);
        let fresh = *w & bit == 0;
        *w |= bit;
        self.len += usize::from(fresh);
        fresh
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
        self.len = 0;
    }

    pub fn intersection_len(&self, other: &Self) -> usize {
        self.words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// Members of `self` missing from `other`, ascending.
    pub fn difference(&self, other: &Self) -> Vec<u32> {
        let mut out = Vec::new();
        for (k, (a, b)) in self.words.iter().zip(other.words.iter()).enumerate() {
            let mut w = a & !b;
            while w != 0 {
                out.push(k as u32 * 64 + w.trailing_zeros());
                w &= w - 1;
            }
        }
        out
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.difference(&Members::new(self.words.len() * 64))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct AbstractChain {
    pub blocks: usize,
    pub pb: Members,
}

impl ChainCandidate for AbstractChain {
    fn block_count(&self) -> usize {
        self.blocks
    }

    fn partial_len(&self) -> usize {
        self.pb.len()
    }

    fn partial_contains(&self, agent: AgentId) -> bool {
        self.pb.contains(agent.0)
    }

    fn same_partial_agents(&self, other: &Self) -> bool {
        self.pb == other.pb
    }

    fn partial_agents_missing_from(&self, other: &Self) -> Vec<AgentId> {
        self.pb.difference(&other.pb).into_iter().map(AgentId).collect()
    }
}

/// Scripted attestation: an honest agent sees an incoming partial block as
/// maximally distant when enough poisoned records are in it for the poison to
/// survive combining, and as identical otherwise. Poisoned agents accept
/// everything.
struct ScriptedChecks<'a> {
    incoming: &'a AbstractChain,
    poisoned: &'a Members,
    viewer_poisoned: bool,
    p_a: f64,
}

impl CandidateChecks for ScriptedChecks<'_> {
    fn last_block_valid(&mut self) -> bool {
        true
    }

    fn partial_valid(&mut self) -> bool {
        true
    }

    fn partial_distance(&mut self) -> f64 {
        let len = self.incoming.pb.len();
        if self.viewer_poisoned || len == 0 {
            return 0.0;
        }
        let bad = self.incoming.pb.intersection_len(self.poisoned);
        if bad as f64 / len as f64 > self.p_a {
            1.0
        } else {
            0.0
        }
    }
}

pub(crate) struct AbstractNode {
    id: u32,
    chain: Rc<AbstractChain>,
    equal_seen: u32,
    poisoned: Rc<Members>,
    protocol: Rc<ProtocolParams>,
    alpha: f64,
    p_a: f64,
}

impl AbstractNode {
    pub fn new(id: u32, n: usize, poisoned: Rc<Members>, protocol: Rc<ProtocolParams>, alpha: f64, p_a: f64) -> Self {
        Self {
            id,
            chain: Rc::new(AbstractChain {
                blocks: 0,
                pb: Members::new(n),
            }),
            equal_seen: 0,
            poisoned,
            protocol,
            alpha,
            p_a,
        }
    }
}

impl Node for AbstractNode {
    type Msg = Rc<AbstractChain>;

    fn share(&mut self, _now: f64) -> Result<ShareEffect> {
        self.equal_seen = 0;
        let mut effect = ShareEffect::default();
        if !self.chain.pb.contains(self.id) {
            Rc::make_mut(&mut self.chain).pb.insert(self.id);
            effect.changed = true;
        }
        if self.chain.pb.len() >= self.protocol.block_size {
            let c = Rc::make_mut(&mut self.chain);
            c.blocks += 1;
            c.pb.clear();
            effect.closed = true;
        }
        Ok(effect)
    }

    fn message(&self) -> Self::Msg {
        Rc::clone(&self.chain)
    }

    fn receive(&mut self, msg: &Self::Msg, sender: u32, _now: f64) -> Result<Option<Decision>> {
        let mut checks = ScriptedChecks {
            incoming: msg,
            poisoned: &self.poisoned,
            viewer_poisoned: self.poisoned.contains(self.id),
            p_a: self.p_a,
        };
        let decision = decide(
            AgentId(self.id),
            AgentId(sender),
            self.chain.as_ref(),
            msg.as_ref(),
            &self.protocol,
            self.alpha,
            &mut self.equal_seen,
            &mut checks,
        );
        if matches!(decision, Decision::ReplaceChain | Decision::ReplaceChainAndAdopt) {
            self.chain = Rc::clone(msg);
        }
        Ok(Some(decision))
    }

    fn blocks(&self) -> usize {
        self.chain.blocks
    }

    fn pb_members(&self) -> Vec<u32> {
        self.chain.pb.to_vec()
    }
}
