//! Agents running the real protocol: trained models, signed records,
//! combining and attestation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::engine::{Node, ShareEffect};
use super::{SignerKind, SimConfig};
use crate::agent::AgentState;
use crate::chain::crypto::{Ed25519Signer, KeyedHashSigner, Keyring, SignatureProvider};
use crate::chain::{receive_chain, AgentId, Chain, Decision};
use crate::emm::{state_of_address, FrequencyMatrix, ModelParams};
use crate::error::{Error, Result};
use crate::traces::{gen_benign_trace, GroundTruthModel};

pub(crate) struct ConcreteNode {
    pub agent: AgentState,
}

impl Node for ConcreteNode {
    type Msg = Arc<Chain>;

    fn share(&mut self, now: f64) -> Result<ShareEffect> {
        let out = self.agent.share(now)?;
        Ok(ShareEffect {
            changed: out.contributed || out.closed_block,
            closed: out.closed_block,
        })
    }

    fn message(&self) -> Self::Msg {
        Arc::clone(&self.agent.chain)
    }

    fn receive(&mut self, msg: &Self::Msg, sender: u32, now: f64) -> Result<Option<Decision>> {
        match receive_chain(&mut self.agent, msg, AgentId(sender), now) {
            Ok(d) => Ok(Some(d)),
            Err(Error::RateLimited { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn blocks(&self) -> usize {
        self.agent.chain.len()
    }

    fn pb_members(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.agent.chain.partial.agents().map(|a| a.0).collect();
        v.sort_unstable();
        v
    }
}

/// Trains a model directly from a benign trace.
pub fn train_model(gt: &GroundTruthModel, steps: usize, seed: u64) -> Result<FrequencyMatrix> {
    let trace = gen_benign_trace(gt, steps, seed)?;
    let mut m = FrequencyMatrix::new();
    let states: Vec<u64> = trace
        .iter()
        .map(|r| state_of_address(r.address, gt.region_size))
        .collect::<Result<_>>()?;
    for w in states.windows(2) {
        m.record_transition(w[0], w[1]);
    }
    Ok(m)
}

/// Agents selected for poisoning, by seeded shuffle.
pub(crate) fn poisoned_ids(n: usize, count: usize, seed: u64) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9015_04ed));
    ids.truncate(count.min(n));
    ids.sort_unstable();
    ids
}

/// One clean agent per simulated node, each trained on its own benign trace
/// from the shared generator.
pub fn build_agents(cfg: &SimConfig) -> Result<Vec<AgentState>> {
    let gt = GroundTruthModel::generate(&cfg.concrete.generator)?;
    let provider: Arc<dyn SignatureProvider> = match cfg.concrete.signer {
        SignerKind::KeyedHash => Arc::new(KeyedHashSigner),
        SignerKind::Ed25519 => Arc::new(Ed25519Signer),
    };
    let keys: Vec<_> = (0..cfg.n_agents as u64)
        .map(|i| provider.keypair_from_seed(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i)))
        .collect();
    let keyring: Arc<Keyring> = Arc::new(
        keys.iter()
            .enumerate()
            .map(|(i, k)| (AgentId(i as u32), k.public.clone()))
            .collect(),
    );
    let params = ModelParams {
        region_size_bytes: gt.region_size,
        p_a: cfg.p_a,
        alpha: cfg.alpha,
        t_grace_secs: 0.0,
        ..ModelParams::paper()
    };
    let protocol = cfg.protocol();
    keys.into_iter()
        .enumerate()
        .map(|(i, kp)| {
            let seed = cfg.seed.wrapping_mul(31).wrapping_add(7919 * i as u64 + 1);
            let model = train_model(&gt, cfg.concrete.train_steps, seed)?;
            AgentState::builder(AgentId(i as u32), kp, Arc::clone(&provider), Arc::clone(&keyring))
                .params(params.clone())
                .protocol(protocol.clone())
                .chain(Chain::genesis("sim", "1"))
                .model(model)
                .build()
        })
        .collect()
}
